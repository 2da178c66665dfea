//! Collision-invariant basis, the slow eigenpair `(τ_u, φ_u)` of the pencil
//! `𝓛φ = τ(ξ₁+u)φ`, the derived `ψ_u`, the rank-one projections, and the
//! 3×3 moment matrix `𝒜` whose left eigenvectors define the admissibility
//! functionals.

use crate::collision::ReducedOperator;
use crate::error::{LabError, Result};
use crate::grids::{sqrt_maxwellian, VelocityGrid};
use crate::scalar::{norm2, Real};
use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

/// The five-element invariant basis on the full grid.
#[derive(Clone, Debug)]
pub struct InvariantBasis {
    /// `X₊ = (|ξ|² + √15 ξ₁)√M/√30`.
    pub x_plus: Vec<f64>,
    /// `X₀ = (|ξ|² − 5)√M/√10`.
    pub x_zero: Vec<f64>,
    /// `X₋ = (|ξ|² − √15 ξ₁)√M/√30`.
    pub x_minus: Vec<f64>,
    /// `ξ₂√M`.
    pub x2: Vec<f64>,
    /// `ξ₃√M`.
    pub x3: Vec<f64>,
}

/// Quadrature identities of the basis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisReport {
    /// Gram matrix in the order `(X₊, X₀, X₋, ξ₂√M, ξ₃√M)`.
    pub gram: [[f64; 5]; 5],
    /// `⟨ξ₁ e_k²⟩` in the same order.
    pub flux: [f64; 5],
    /// `max |gram − I|`.
    pub orthonormality_error: f64,
}

/// Closed-form `X₊, X₀, X₋` at a velocity.
pub fn hydrodynamic_modes(v: &[f64; 3]) -> [f64; 3] {
    let m = sqrt_maxwellian(v);
    let s2 = norm2(v);
    let r15 = 15f64.sqrt();
    let c = 1.0 / 30f64.sqrt();
    [
        c * (s2 + r15 * v[0]) * m,
        (s2 - 5.0) * m / 10f64.sqrt(),
        c * (s2 - r15 * v[0]) * m,
    ]
}

impl InvariantBasis {
    /// Evaluates the basis on a grid.
    pub fn new<T: Real>(grid: &VelocityGrid<T>) -> Self {
        let nodes: Vec<[f64; 3]> = grid
            .nodes
            .iter()
            .map(|v| [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()])
            .collect();
        let modes: Vec<[f64; 3]> = nodes.iter().map(hydrodynamic_modes).collect();
        Self {
            x_plus: modes.iter().map(|m| m[0]).collect(),
            x_zero: modes.iter().map(|m| m[1]).collect(),
            x_minus: modes.iter().map(|m| m[2]).collect(),
            x2: nodes.iter().map(|v| v[1] * sqrt_maxwellian(v)).collect(),
            x3: nodes.iter().map(|v| v[2] * sqrt_maxwellian(v)).collect(),
        }
    }

    /// Elements in the order `(X₊, X₀, X₋, ξ₂√M, ξ₃√M)`.
    pub fn elements(&self) -> [&[f64]; 5] {
        [&self.x_plus, &self.x_zero, &self.x_minus, &self.x2, &self.x3]
    }

    /// Gram matrix and flux table.
    pub fn report<T: Real>(&self, grid: &VelocityGrid<T>) -> BasisReport {
        let q: Vec<f64> = grid.weights.iter().map(|w| w.to_f64_lossy()).collect();
        let xi1: Vec<f64> = grid.nodes.iter().map(|v| v[0].to_f64_lossy()).collect();
        let e = self.elements();
        let mut gram = [[0.0; 5]; 5];
        let mut flux = [0.0; 5];
        let mut err: f64 = 0.0;
        for a in 0..5 {
            for b in 0..5 {
                gram[a][b] = (0..q.len()).map(|i| q[i] * e[a][i] * e[b][i]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                err = err.max((gram[a][b] - target).abs());
            }
            flux[a] = (0..q.len()).map(|i| q[i] * xi1[i] * e[a][i] * e[a][i]).sum();
        }
        BasisReport {
            gram,
            flux,
            orthonormality_error: err,
        }
    }
}

/// Builds the basis and checks orthonormality (`tol_gram`) and the flux
/// identities (`tol_flux`), naming the offending pair on failure.
pub fn build_basis<T: Real>(
    grid: &VelocityGrid<T>,
    tol_gram: f64,
    tol_flux: f64,
) -> Result<(InvariantBasis, BasisReport)> {
    let names = ["X+", "X0", "X-", "xi2 sqrtM", "xi3 sqrtM"];
    let basis = InvariantBasis::new(grid);
    let rep = basis.report(grid);
    for a in 0..5 {
        for b in 0..5 {
            let target = if a == b { 1.0 } else { 0.0 };
            if (rep.gram[a][b] - target).abs() > tol_gram {
                return Err(LabError::Tolerance(format!(
                    "<{} {}> = {:.3e}, expected {target}",
                    names[a], names[b], rep.gram[a][b]
                )));
            }
        }
    }
    let r = (5.0f64 / 3.0).sqrt();
    let expect = [r, 0.0, -r, 0.0, 0.0];
    for a in 0..5 {
        if (rep.flux[a] - expect[a]).abs() > tol_flux {
            return Err(LabError::Tolerance(format!(
                "<xi1 {}^2> = {:.6}, expected {:.6}",
                names[a], rep.flux[a], expect[a]
            )));
        }
    }
    Ok((basis, rep))
}

/// Reduced-space hydrodynamic basis, orthonormalized in the discrete
/// inner product (`X₊` first, then `X₀`, then `X₋`) so that the moment
/// algebra of the penalized problem holds exactly on the grid.
#[derive(Clone, Debug)]
pub struct ReducedBasis {
    /// `X₊`.
    pub x_plus: Vec<f64>,
    /// `X₀`.
    pub x_zero: Vec<f64>,
    /// `X₋`.
    pub x_minus: Vec<f64>,
}

impl ReducedBasis {
    /// Builds from the operator's representative nodes.
    pub fn new(op: &ReducedOperator) -> Self {
        let modes: Vec<[f64; 3]> = op.nodes.iter().map(hydrodynamic_modes).collect();
        let mut out: Vec<Vec<f64>> = Vec::new();
        for k in 0..3 {
            let mut v: Vec<f64> = modes.iter().map(|m| m[k]).collect();
            for _ in 0..2 {
                for b in &out {
                    let c = op.inner(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
            }
            let nrm = op.inner(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= nrm);
            out.push(v);
        }
        let x_minus = out.pop().expect("three modes");
        let x_zero = out.pop().expect("three modes");
        let x_plus = out.pop().expect("three modes");
        Self {
            x_plus,
            x_zero,
            x_minus,
        }
    }
}

/// Slow eigenpair of `𝓛φ = τ(ξ₁+u)φ`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigenSolution {
    /// Drift.
    pub u: f64,
    /// Eigenvalue.
    pub tau: f64,
    /// Eigenfunction on the reduced space, normalized so that
    /// `⟨(ξ₁+u)φ²⟩ = −u`.
    pub phi: Vec<f64>,
    /// `ψ_u = (φ_u − φ₀)/u`, once computed.
    pub psi: Option<Vec<f64>>,
    /// `φ₀` used for `ψ_u`.
    pub phi0: Option<Vec<f64>>,
    /// Coefficient `c` in `φ₀ = c·X₀`.
    pub phi0_coeff: Option<f64>,
    /// `|⟨(ξ₁+u)φ²⟩ + u|`.
    pub normalization_residual: f64,
    /// `‖𝓛φ − τ(ξ₁+u)φ‖₂/‖φ‖₂`.
    pub eigen_residual: f64,
    /// Distance from `τ` to the next nonzero eigenvalue.
    pub gap: f64,
}

/// Options for the eigen solver.
#[derive(Clone, Copy, Debug)]
pub struct EigenOptions {
    /// Use the dense symmetric reformulation (otherwise shift-invert).
    pub dense: bool,
    /// First drift of the continuation.
    pub u_min: f64,
    /// Largest continuation step.
    pub max_step: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            dense: true,
            u_min: 1e-3,
            max_step: 2.5e-3,
        }
    }
}

/// All nonzero eigenpairs `(τ, φ)` of the pencil, via the symmetric
/// reformulation `B x = τ J x` with `B = |D|^{−1/2} Q^{1/2} 𝓛 Q^{−1/2}
/// |D|^{−1/2}` and `J = sign(D)`, solved as `B^{1/2} J B^{1/2} z = τ z` on the
/// range of `B`.
pub fn pencil_spectrum(op: &ReducedOperator, u: f64) -> Result<Vec<(f64, Vec<f64>)>> {
    let n = op.len();
    let d: Vec<f64> = op.xi1.iter().map(|x| x + u).collect();
    if let Some(x) = d.iter().find(|x| x.abs() < 1e-12) {
        return Err(LabError::Grazing(format!("ξ₁ + u = {x:e} on the grid")));
    }
    let sq: Vec<f64> = op.q.iter().map(|q| q.sqrt()).collect();
    let sd: Vec<f64> = d.iter().map(|x| x.abs().sqrt()).collect();
    let mut b = DMatrix::from_fn(n, n, |i, j| {
        sq[i] * op.l[(i, j)] / sq[j] / (sd[i] * sd[j])
    });
    b = (&b + b.transpose()) * 0.5;
    let eb = SymmetricEigen::new(b);
    let lam_max = eb.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let keep: Vec<usize> = (0..n)
        .filter(|&k| eb.eigenvalues[k] > 1e-10 * lam_max)
        .collect();
    if eb.eigenvalues.iter().any(|&l| l < -1e-8 * lam_max) {
        return Err(LabError::Eigen(
            "discrete 𝓛 is not positive semidefinite; the symmetric reformulation needs 𝓛 ≥ 0".into(),
        ));
    }
    let m = keep.len();
    let w = DMatrix::from_fn(n, m, |i, k| eb.eigenvectors[(i, keep[k])]);
    let sl: Vec<f64> = keep.iter().map(|&k| eb.eigenvalues[k].sqrt()).collect();
    let mut c = DMatrix::zeros(m, m);
    for a in 0..m {
        for bb in a..m {
            let s: f64 = (0..n).map(|i| w[(i, a)] * d[i].signum() * w[(i, bb)]).sum();
            let v = sl[a] * s * sl[bb];
            c[(a, bb)] = v;
            c[(bb, a)] = v;
        }
    }
    let ec = SymmetricEigen::new(c);
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let tau = ec.eigenvalues[k];
        if tau.abs() < 1e-14 {
            continue;
        }
        let z = ec.eigenvectors.column(k);
        // x = J W Λ^{1/2} z / τ, φ = Q^{−1/2}|D|^{−1/2} x.
        let y: Vec<f64> = (0..m).map(|a| sl[a] * z[a]).collect();
        let phi: Vec<f64> = (0..n)
            .map(|i| {
                let x: f64 = (0..m).map(|a| w[(i, a)] * y[a]).sum::<f64>() * d[i].signum() / tau;
                x / (sq[i] * sd[i])
            })
            .collect();
        out.push((tau, phi));
    }
    Ok(out)
}

fn normalize_branch(op: &ReducedOperator, u: f64, tau: f64, mut phi: Vec<f64>, gap: f64) -> Result<EigenSolution> {
    let flux: f64 = (0..phi.len())
        .map(|i| op.q[i] * (op.xi1[i] + u) * phi[i] * phi[i])
        .sum();
    if flux * (-u) <= 0.0 {
        return Err(LabError::Eigen(format!(
            "normalization impossible: ⟨(ξ₁+u)φ²⟩ = {flux:e} has the sign of u = {u:e}"
        )));
    }
    let s = (-u / flux).sqrt();
    phi.iter_mut().for_each(|x| *x *= s);
    let flux2: f64 = (0..phi.len())
        .map(|i| op.q[i] * (op.xi1[i] + u) * phi[i] * phi[i])
        .sum();
    let lphi = op.apply_l(&phi);
    let res: f64 = (0..phi.len())
        .map(|i| {
            let r = lphi[i] - tau * (op.xi1[i] + u) * phi[i];
            op.q[i] * r * r
        })
        .sum::<f64>()
        .sqrt()
        / op.inner(&phi, &phi).sqrt();
    Ok(EigenSolution {
        u,
        tau,
        phi,
        psi: None,
        phi0: None,
        phi0_coeff: None,
        normalization_residual: (flux2 + u).abs(),
        eigen_residual: res,
        gap,
    })
}

fn overlap(op: &ReducedOperator, a: &[f64], b: &[f64]) -> f64 {
    op.inner(a, b) / (op.inner(a, a) * op.inner(b, b)).sqrt()
}

/// `κ = ⟨ξ₁X₀, 𝓛⁺ ξ₁X₀⟩` (pseudo-inverse on the range), which predicts the
/// slow branch `τ_u ≈ −u/κ`.
pub fn slow_branch_constant(op: &ReducedOperator, basis: &ReducedBasis) -> f64 {
    let n = op.len();
    let sq: Vec<f64> = op.q.iter().map(|q| q.sqrt()).collect();
    let a = DMatrix::from_fn(n, n, |i, j| sq[i] * op.l[(i, j)] / sq[j]);
    let a = (&a + a.transpose()) * 0.5;
    let e = SymmetricEigen::new(a);
    let lmax = e.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let rhs: Vec<f64> = (0..n).map(|i| sq[i] * op.xi1[i] * basis.x_zero[i]).collect();
    let mut kappa = 0.0;
    for k in 0..n {
        let lam = e.eigenvalues[k];
        if lam > 1e-10 * lmax {
            let c: f64 = (0..n).map(|i| e.eigenvectors[(i, k)] * rhs[i]).sum();
            kappa += c * c / lam;
        }
    }
    kappa
}

/// Shift-invert iteration for the pencil near `sigma`, started from `start`.
fn shift_invert(
    op: &ReducedOperator,
    u: f64,
    sigma: f64,
    start: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = op.len();
    let d: Vec<f64> = op.xi1.iter().map(|x| x + u).collect();
    let mut a = op.l.clone();
    for i in 0..n {
        a[(i, i)] -= sigma * d[i];
    }
    let lu = a.lu();
    let mut x = DVector::from_column_slice(start);
    let mut tau = sigma;
    for _ in 0..200 {
        let rhs = DVector::from_fn(n, |i, _| d[i] * x[i]);
        let y = lu
            .solve(&rhs)
            .ok_or(LabError::Singular("shift-invert pencil"))?;
        let nrm = y.norm();
        x = y / nrm;
        let xs: Vec<f64> = x.iter().copied().collect();
        let lx = op.apply_l(&xs);
        let num: f64 = (0..n).map(|i| op.q[i] * xs[i] * lx[i]).sum();
        let den: f64 = (0..n).map(|i| op.q[i] * xs[i] * d[i] * xs[i]).sum();
        let new_tau = num / den;
        let res: f64 = (0..n)
            .map(|i| (lx[i] - new_tau * d[i] * xs[i]).powi(2) * op.q[i])
            .sum::<f64>()
            .sqrt()
            / op.inner(&xs, &xs).sqrt();
        tau = new_tau;
        if res < 1e-13 {
            break;
        }
    }
    Ok((tau, x.iter().copied().collect()))
}

/// Solves for the slow pair at `u` by continuation from `sign(u)·u_min`.
///
/// At the first step the nonzero eigenvalue of smallest modulus is taken and
/// the sign is fixed by `⟨φX₊⟩ ≥ 0`; afterwards the eigenvector with the
/// largest overlap with the previous step is followed.
pub fn solve_eigenpair(
    op: &ReducedOperator,
    basis: &ReducedBasis,
    u: f64,
    opts: &EigenOptions,
) -> Result<EigenSolution> {
    if u == 0.0 || !u.is_finite() {
        return Err(LabError::InvalidParameter {
            name: "u",
            reason: "the slow branch is computed for u ≠ 0".into(),
        });
    }
    let sgn = u.signum();
    let mut steps = vec![sgn * opts.u_min.min(u.abs())];
    while (steps.last().copied().unwrap_or(0.0) - u).abs() > 1e-15 {
        let last = *steps.last().expect("nonempty");
        let next = last + sgn * opts.max_step.min((u - last).abs());
        steps.push(next);
    }
    let kappa = slow_branch_constant(op, basis);
    let mut prev: Option<EigenSolution> = None;
    for &uk in &steps {
        let sol = if opts.dense {
            let spec = pencil_spectrum(op, uk)?;
            let idx = match &prev {
                None => {
                    let mut order: Vec<usize> = (0..spec.len()).collect();
                    order.sort_by(|&a, &b| spec[a].0.abs().total_cmp(&spec[b].0.abs()));
                    if order.len() >= 2 && (spec[order[0]].0 - spec[order[1]].0).abs() < 1e-10 {
                        return Err(LabError::Eigen(format!(
                            "branch ambiguity at u = {uk:e}: τ = {:e} and {:e}",
                            spec[order[0]].0, spec[order[1]].0
                        )));
                    }
                    order[0]
                }
                Some(p) => {
                    let ov: Vec<f64> = spec.iter().map(|(_, f)| overlap(op, f, &p.phi).abs()).collect();
                    let mut order: Vec<usize> = (0..spec.len()).collect();
                    order.sort_by(|&a, &b| ov[b].total_cmp(&ov[a]));
                    let best = order[0];
                    if order.len() >= 2 && (spec[best].0 - spec[order[1]].0).abs() < 1e-10 {
                        return Err(LabError::Eigen(format!(
                            "branch ambiguity at u = {uk:e}: two candidates near τ = {:e}",
                            spec[best].0
                        )));
                    }
                    best
                }
            };
            let tau = spec[idx].0;
            let gap = spec
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != idx)
                .map(|(_, (t, _))| (t - tau).abs())
                .fold(f64::INFINITY, f64::min);
            normalize_branch(op, uk, tau, spec[idx].1.clone(), gap)?
        } else {
            let (sigma, start) = match &prev {
                None => (-uk / kappa, basis.x_zero.clone()),
                Some(p) => (p.tau * uk / p.u, p.phi.clone()),
            };
            let (tau, phi) = shift_invert(op, uk, sigma * (1.0 + 1e-3), &start)?;
            normalize_branch(op, uk, tau, phi, f64::NAN)?
        };
        let mut sol = sol;
        let orient = match &prev {
            None => {
                let c = op.inner(&sol.phi, &basis.x_plus);
                if c.abs() > 1e-14 {
                    c
                } else {
                    op.inner(&sol.phi, &basis.x_zero)
                }
            }
            Some(p) => op.inner(&sol.phi, &p.phi),
        };
        if orient < 0.0 {
            sol.phi.iter_mut().for_each(|x| *x = -*x);
        }
        prev = Some(sol);
    }
    prev.ok_or_else(|| LabError::Eigen("empty continuation".into()))
}

/// Sensitivity data of the `φ₀` extrapolation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PsiReport {
    /// Overlap of `φ_{δu}` and `φ_{−δu}`.
    pub overlap: f64,
    /// Coefficient `c` in `φ₀ = cX₀`.
    pub phi0_coeff: f64,
    /// `‖(φ_δ+φ_{−δ})/2 − φ₀‖/‖φ₀‖` (part discarded by the projection).
    pub discarded: f64,
    /// `⟨(ξ₁+u)ψ_uφ_u⟩` (exactly −1 in the continuum).
    pub flux_psi_phi: f64,
}

/// Computes `φ₀` from the pairs at `±δu` and sets `ψ_u = (φ_u − φ₀)/u`.
pub fn compute_psi(
    op: &ReducedOperator,
    basis: &ReducedBasis,
    sol: &mut EigenSolution,
    delta_u: f64,
    opts: &EigenOptions,
) -> Result<PsiReport> {
    let mut o = *opts;
    o.u_min = o.u_min.min(delta_u);
    let plus = solve_eigenpair(op, basis, delta_u, &o)?;
    let mut minus = solve_eigenpair(op, basis, -delta_u, &o)?;
    let mut ov = overlap(op, &plus.phi, &minus.phi);
    if ov < 0.0 {
        minus.phi.iter_mut().for_each(|x| *x = -*x);
        ov = -ov;
    }
    if ov < 0.9 {
        return Err(LabError::Eigen(format!(
            "φ₀ extrapolation diverged: overlap of φ(±δu) is {ov:.3}"
        )));
    }
    let avg: Vec<f64> = plus.phi.iter().zip(&minus.phi).map(|(a, b)| 0.5 * (a + b)).collect();
    let c = op.inner(&avg, &basis.x_zero);
    let phi0: Vec<f64> = basis.x_zero.iter().map(|x| c * x).collect();
    let diff: Vec<f64> = avg.iter().zip(&phi0).map(|(a, b)| a - b).collect();
    let discarded = (op.inner(&diff, &diff) / op.inner(&phi0, &phi0)).sqrt();
    // Keep φ₀ aligned with the branch at u.
    let (phi0, c) = if op.inner(&phi0, &sol.phi) < 0.0 {
        (phi0.iter().map(|x| -x).collect::<Vec<_>>(), -c)
    } else {
        (phi0, c)
    };
    let u = sol.u;
    let psi: Vec<f64> = sol.phi.iter().zip(&phi0).map(|(p, z)| (p - z) / u).collect();
    let flux: f64 = (0..psi.len())
        .map(|i| op.q[i] * (op.xi1[i] + u) * psi[i] * sol.phi[i])
        .sum();
    sol.psi = Some(psi);
    sol.phi0 = Some(phi0);
    sol.phi0_coeff = Some(c);
    Ok(PsiReport {
        overlap: ov,
        phi0_coeff: c,
        discarded,
        flux_psi_phi: flux,
    })
}

/// `max_r w_θ(ξ_r)|f_r|` on the reduced space.
pub fn weighted_sup(op: &ReducedOperator, f: &[f64], theta: f64) -> f64 {
    op.nodes
        .iter()
        .zip(f)
        .map(|(v, x)| (theta * norm2(v)).exp() * x.abs())
        .fold(0.0, f64::max)
}

/// Rank-one maps built from a completed eigen solution.
#[derive(Clone, Debug)]
pub struct Projections {
    /// Drift.
    pub u: f64,
    /// `X₊`.
    pub x_plus: Vec<f64>,
    /// `X₀`.
    pub x_zero: Vec<f64>,
    /// `φ_u`.
    pub phi: Vec<f64>,
    /// `ψ_u`.
    pub psi: Vec<f64>,
    /// `Q·(ξ₁+u)·ψ_u`, the functional of `p_u`.
    pub flux_psi: Vec<f64>,
    /// `Q·(ξ₁+u)·X₊`, the functional of `Π₊((ξ₁+u)·)`.
    pub flux_xp: Vec<f64>,
    /// `(ξ₁+u)φ_u`.
    pub flux_phi: Vec<f64>,
    /// `Q`.
    pub q: Vec<f64>,
}

impl Projections {
    /// Builds from a solution with `ψ_u`.
    pub fn new(op: &ReducedOperator, basis: &ReducedBasis, sol: &EigenSolution) -> Result<Self> {
        let psi = sol
            .psi
            .clone()
            .ok_or_else(|| LabError::Eigen("ψ_u not computed".into()))?;
        let u = sol.u;
        let n = op.len();
        Ok(Self {
            u,
            flux_psi: (0..n).map(|i| op.q[i] * (op.xi1[i] + u) * psi[i]).collect(),
            flux_xp: (0..n).map(|i| op.q[i] * (op.xi1[i] + u) * basis.x_plus[i]).collect(),
            flux_phi: (0..n).map(|i| (op.xi1[i] + u) * sol.phi[i]).collect(),
            x_plus: basis.x_plus.clone(),
            x_zero: basis.x_zero.clone(),
            phi: sol.phi.clone(),
            psi,
            q: op.q.clone(),
        })
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// `Π₊g = ⟨gX₊⟩X₊`.
    pub fn project_plus(&self, g: &[f64]) -> Vec<f64> {
        let c: f64 = (0..g.len()).map(|i| self.q[i] * g[i] * self.x_plus[i]).sum();
        self.x_plus.iter().map(|x| c * x).collect()
    }

    /// `p_u g = −⟨(ξ₁+u)ψ_u g⟩φ_u`.
    pub fn p_u(&self, g: &[f64]) -> Vec<f64> {
        let c = -Self::dot(&self.flux_psi, g);
        self.phi.iter().map(|x| c * x).collect()
    }

    /// `P_u g = −⟨ψ_u g⟩(ξ₁+u)φ_u`.
    pub fn big_p_u(&self, g: &[f64]) -> Vec<f64> {
        let c: f64 = -(0..g.len()).map(|i| self.q[i] * self.psi[i] * g[i]).sum::<f64>();
        self.flux_phi.iter().map(|x| c * x).collect()
    }

    /// `(𝓘 − P_u)g`.
    pub fn complement_p_u(&self, g: &[f64]) -> Vec<f64> {
        let p = self.big_p_u(g);
        g.iter().zip(p).map(|(a, b)| a - b).collect()
    }

    /// `K^p g = Kg − α Π₊((ξ₁+u)g) − β p_u g`.
    pub fn apply_kp(&self, op: &ReducedOperator, g: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
        let kg = op.apply_k(g);
        let a = alpha * Self::dot(&self.flux_xp, g);
        let b = -beta * Self::dot(&self.flux_psi, g);
        (0..g.len())
            .map(|i| kg[i] - a * self.x_plus[i] - b * self.phi[i])
            .collect()
    }
}

/// Moment matrix `𝒜`, its left eigenvectors and the admissibility fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdmissibilityData {
    /// `𝒜` (row-major).
    pub matrix: [[f64; 3]; 3],
    /// Eigenvalues `μ_i` sorted decreasingly.
    pub eigenvalues: [f64; 3],
    /// Left eigenvectors `l_i` (`l_i𝒜 = μ_i l_i`), unit 2-norm.
    pub left: [[f64; 3]; 3],
    /// `max_i ‖l_i𝒜 − μ_i l_i‖`.
    pub left_residual: f64,
    /// Smallest pairwise eigenvalue distance.
    pub distinctness_margin: f64,
    /// Indices (into `eigenvalues`) of the two functionals imposed at `x = 0`.
    pub selected: [usize; 2],
    /// `Y₁ = (X₊, X₀, ψ_u)·l_{sel₀}`.
    pub y1: Vec<f64>,
    /// `Y₂ = (X₊, X₀, ψ_u)·l_{sel₁}`.
    pub y2: Vec<f64>,
    /// Drift.
    pub u: f64,
    /// Penalization rate `γ`.
    pub gamma: f64,
    /// `Q·(ξ₁+u)` (for evaluating the functionals).
    pub flux_weight: Vec<f64>,
}

/// Assembles `𝒜` for `(α, β, γ)`:
///
/// ```text
/// [ α            0        −uβ⟨ψX₊⟩      ]
/// [ 0            0        −β⟨φX₀⟩       ]
/// [ α⟨ψX₊⟩       cτ/u     τ − β⟨ψφ⟩     ]
/// ```
///
/// where `φ₀ = cX₀`. The moments `m = (⟨(ξ₁+u)X₊g⟩, ⟨(ξ₁+u)X₀g⟩,
/// ⟨(ξ₁+u)ψg⟩)` of a penalized solution satisfy `m′ = (γ𝓘 − 𝒜)m`, so the
/// two left eigenvectors with `μ > γ` carry the decaying moment modes; their
/// functionals must vanish at `x = 0` for the penalization to be inactive.
pub fn build_admissibility(
    op: &ReducedOperator,
    basis: &ReducedBasis,
    sol: &EigenSolution,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<AdmissibilityData> {
    let psi = sol
        .psi
        .as_ref()
        .ok_or_else(|| LabError::Eigen("ψ_u not computed".into()))?;
    let c = sol.phi0_coeff.unwrap_or(1.0);
    let u = sol.u;
    let tau = sol.tau;
    let psi_xp = op.inner(psi, &basis.x_plus);
    let phi_x0 = op.inner(&sol.phi, &basis.x_zero);
    let psi_phi = op.inner(psi, &sol.phi);
    let a = Matrix3::new(
        alpha,
        0.0,
        -u * beta * psi_xp,
        0.0,
        0.0,
        -beta * phi_x0,
        alpha * psi_xp,
        c * tau / u,
        tau - beta * psi_phi,
    );
    let ev = a.complex_eigenvalues();
    if ev.iter().any(|z| z.im.abs() > 1e-12 * (1.0 + z.re.abs())) {
        return Err(LabError::Eigen(format!("𝒜 has complex eigenvalues {ev:?}")));
    }
    let mut mu: Vec<f64> = ev.iter().map(|z| z.re).collect();
    mu.sort_by(|x, y| y.total_cmp(x));
    let margin = (mu[0] - mu[1]).abs().min((mu[1] - mu[2]).abs());
    let scale = mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if margin <= 1e-12 * scale {
        return Err(LabError::Eigen(format!("𝒜 has repeated eigenvalues {mu:?}")));
    }
    let at = a.transpose();
    let mut left = [[0.0; 3]; 3];
    let mut resid: f64 = 0.0;
    for (k, &m) in mu.iter().enumerate() {
        let l = left_eigenvector(&at, m);
        let r = (l.transpose() * a - m * l.transpose()).norm();
        resid = resid.max(r);
        left[k] = [l[0], l[1], l[2]];
    }
    let sel: Vec<usize> = (0..3).filter(|&k| mu[k] > gamma).collect();
    if sel.len() != 2 {
        return Err(LabError::Eigen(format!(
            "expected two eigenvalues of 𝒜 above γ = {gamma:e}, found {mu:?}"
        )));
    }
    let comb = |l: &[f64; 3]| -> Vec<f64> {
        (0..op.len())
            .map(|i| basis.x_plus[i] * l[0] + basis.x_zero[i] * l[1] + psi[i] * l[2])
            .collect()
    };
    Ok(AdmissibilityData {
        matrix: [
            [a[(0, 0)], a[(0, 1)], a[(0, 2)]],
            [a[(1, 0)], a[(1, 1)], a[(1, 2)]],
            [a[(2, 0)], a[(2, 1)], a[(2, 2)]],
        ],
        eigenvalues: [mu[0], mu[1], mu[2]],
        y1: comb(&left[sel[0]]),
        y2: comb(&left[sel[1]]),
        left,
        left_residual: resid,
        distinctness_margin: margin,
        selected: [sel[0], sel[1]],
        u,
        gamma,
        flux_weight: (0..op.len()).map(|i| op.q[i] * (op.xi1[i] + u)).collect(),
    })
}

/// Null vector of `Aᵀ − μI` by the largest cross product of its rows,
/// polished by two steps of inverse iteration.
fn left_eigenvector(at: &Matrix3<f64>, mu: f64) -> Vector3<f64> {
    let m = at - Matrix3::identity() * mu;
    let rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    let mut best = Vector3::zeros();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let c = rows[i].cross(&rows[j]);
        if c.norm() > best.norm() {
            best = c;
        }
    }
    let mut v = best.normalize();
    let shift = mu * (1.0 + 1e-10) + 1e-14;
    if let Some(inv) = (at - Matrix3::identity() * shift).try_inverse() {
        for _ in 0..2 {
            v = (inv * v).normalize();
        }
    }
    if v.iter().map(|x| x.abs()).fold(0.0, f64::max) > 0.0 {
        let k = (0..3).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).expect("3");
        if v[k] < 0.0 {
            v = -v;
        }
    }
    v
}

impl AdmissibilityData {
    /// `(r₁, r₂) = (⟨(ξ₁+u)Y₁g₀⟩, ⟨(ξ₁+u)Y₂g₀⟩)`.
    pub fn residual(&self, g0: &[f64]) -> (f64, f64) {
        let r = |y: &[f64]| -> f64 {
            (0..g0.len()).map(|i| self.flux_weight[i] * y[i] * g0[i]).sum()
        };
        (r(&self.y1), r(&self.y2))
    }

    /// Moments `m = (⟨(ξ₁+u)X₊g⟩, ⟨(ξ₁+u)X₀g⟩, ⟨(ξ₁+u)ψg⟩)`.
    pub fn moments(&self, proj: &Projections, g: &[f64]) -> [f64; 3] {
        let f = |y: &[f64]| -> f64 {
            (0..g.len()).map(|i| self.flux_weight[i] * y[i] * g[i]).sum()
        };
        [f(&proj.x_plus), f(&proj.x_zero), f(&proj.psi)]
    }
}

/// Free function form of [`AdmissibilityData::residual`].
pub fn admissibility_residual(data: &AdmissibilityData, g0: &[f64]) -> (f64, f64) {
    data.residual(g0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::GradConstants;
    use crate::grids::VelocityScheme;

    fn setup(n: usize) -> (ReducedOperator, ReducedBasis) {
        let g = VelocityGrid::<f64>::new(6.0, n, VelocityScheme::Uniform, 0.02).unwrap();
        let op = ReducedOperator::assemble(&g, GradConstants::physical(), true);
        let b = ReducedBasis::new(&op);
        (op, b)
    }

    #[test]
    fn basis_identities_on_coarse_grid() {
        let g = VelocityGrid::<f64>::new(6.0, 12, VelocityScheme::Uniform, 0.02).unwrap();
        let (_, rep) = build_basis(&g, 1e-3, 1e-2).unwrap();
        assert!(rep.flux[3].abs() < 1e-10);
    }

    #[test]
    fn slow_pair_is_normalized_and_small() {
        let (op, b) = setup(8);
        let sol = solve_eigenpair(&op, &b, 0.02, &EigenOptions::default()).unwrap();
        assert!(sol.normalization_residual < 1e-12);
        assert!(sol.eigen_residual < 1e-8, "{}", sol.eigen_residual);
        assert!(sol.tau < 0.0 && sol.tau.abs() < 1.0, "{}", sol.tau);
    }

    #[test]
    fn dense_and_shift_invert_agree() {
        let (op, b) = setup(8);
        let d = solve_eigenpair(&op, &b, 0.02, &EigenOptions::default()).unwrap();
        let s = solve_eigenpair(
            &op,
            &b,
            0.02,
            &EigenOptions {
                dense: false,
                ..EigenOptions::default()
            },
        )
        .unwrap();
        assert!((d.tau - s.tau).abs() < 1e-9 * d.tau.abs(), "{} {}", d.tau, s.tau);
        assert!(overlap(&op, &d.phi, &s.phi) > 1.0 - 1e-9);
    }

    #[test]
    fn psi_identity_and_admissibility() {
        let (op, b) = setup(8);
        let mut sol = solve_eigenpair(&op, &b, 0.02, &EigenOptions::default()).unwrap();
        let rep = compute_psi(&op, &b, &mut sol, 1e-3, &EigenOptions::default()).unwrap();
        assert!((rep.flux_psi_phi + 1.0).abs() < 1e-8, "{}", rep.flux_psi_phi);
        let psi = sol.psi.as_ref().unwrap();
        let phi0 = sol.phi0.as_ref().unwrap();
        for i in 0..psi.len() {
            assert!((psi[i] * sol.u + phi0[i] - sol.phi[i]).abs() < 1e-14);
        }
        let adm = build_admissibility(&op, &b, &sol, 0.04, 0.04, 0.02).unwrap();
        assert!(adm.left_residual < 1e-12, "{}", adm.left_residual);
        assert!(adm.distinctness_margin > 0.0);
        assert_eq!(adm.residual(&vec![0.0; op.len()]), (0.0, 0.0));
    }
}
