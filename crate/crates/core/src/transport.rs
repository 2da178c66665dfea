//! Penalized transport in the half space and the nonlinear fixed point.
//!
//! The unknown `g` solves
//!
//! ```text
//! (ξ₁+u)∂ₓg + 𝓛^p g = S,   g(0,ξ) = g_b(ξ) for ξ₁+u > 0,
//! 𝓛^p g = 𝓛g + αΠ₊((ξ₁+u)g) + βp_u g − γ(ξ₁+u)g,
//! ```
//!
//! either as one coupled box-scheme system factored by sparse LU, or by
//! source iteration over single-velocity sweeps. The nonlinear problem
//! adds the scalar `h` and reconstructs `f = e^{−γx}(g − hφ_u)`.

use crate::collision::ReducedOperator;
use crate::error::{invalid, LabError, Result};
use crate::field::Field;
use crate::gamma::GammaEvaluator;
use crate::quadrature::exp_linear_weights;
use crate::spectral::{AdmissibilityData, Projections};
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::Mat;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// `|ξ₁+u|` below which a velocity is treated as grazing.
pub const GRAZING_TOL: f64 = 1e-12;

/// Single-velocity integrator along a characteristic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepScheme {
    /// Exact for a source linear between stations.
    Exponential,
    /// Trapezoidal (box) rule, the same discretization as the direct solver.
    Box,
}

/// Solves `d_r g′ + ν̄_r g = q(x)` for every velocity, with `inflow[r]`
/// prescribed at `x = 0` when `d_r > 0` and at `x = L` when `d_r < 0`.
/// Grazing velocities take the local equilibrium `g = q/ν̄`.
pub fn transport_sweep(
    x: &[f64],
    d: &[f64],
    nubar: &[f64],
    source: &Field,
    inflow: &[f64],
    scheme: SweepScheme,
) -> Result<Field> {
    let nx = x.len();
    let nv = d.len();
    if source.nx != nx || source.nv != nv {
        return Err(LabError::DimensionMismatch {
            expected: nx * nv,
            found: source.nx * source.nv,
        });
    }
    if nubar.len() != nv || inflow.len() != nv {
        return Err(LabError::DimensionMismatch {
            expected: nv,
            found: nubar.len().min(inflow.len()),
        });
    }
    let mut out = Field::zeros(nx, nv);
    for r in 0..nv {
        let a = nubar[r];
        if !(a > 0.0) {
            return Err(invalid("ν̄", format!("absorption {a:e} at velocity {r} is not positive")));
        }
        let q = |j: usize| source.data[j * nv + r];
        if d[r].abs() < GRAZING_TOL {
            for j in 0..nx {
                out.data[j * nv + r] = q(j) / a;
            }
            continue;
        }
        let s = d[r].abs();
        let step = |from: usize, to: usize, g: f64| -> f64 {
            let delta = (x[to] - x[from]).abs();
            match scheme {
                SweepScheme::Exponential => {
                    let (e, w_up, w_down) = exp_linear_weights(a / s, delta);
                    e * g + (w_up * q(from) + w_down * q(to)) / s
                }
                SweepScheme::Box => {
                    ((s / delta - 0.5 * a) * g + 0.5 * (q(from) + q(to))) / (s / delta + 0.5 * a)
                }
            }
        };
        if d[r] > 0.0 {
            let mut g = inflow[r];
            out.data[r] = g;
            for j in 1..nx {
                g = step(j - 1, j, g);
                out.data[j * nv + r] = g;
            }
        } else {
            let mut g = inflow[r];
            out.data[(nx - 1) * nv + r] = g;
            for j in (0..nx - 1).rev() {
                g = step(j + 1, j, g);
                out.data[j * nv + r] = g;
            }
        }
    }
    Ok(out)
}

/// The dense penalized operator `𝓛^p` on the orbit space.
#[derive(Clone, Debug)]
pub struct PenalizedOperator {
    /// Drift.
    pub u: f64,
    /// Penalization rate `γ`.
    pub gamma: f64,
    /// Coefficient of `Π₊((ξ₁+u)·)`.
    pub alpha: f64,
    /// Coefficient of `p_u`.
    pub beta: f64,
    /// `ξ₁+u` per reduced node.
    pub d: Vec<f64>,
    /// `ν̄ = ν − γ(ξ₁+u)`.
    pub nubar: Vec<f64>,
    /// `𝓛^p` (row-major dense).
    pub matrix: DMatrix<f64>,
    /// Rank-one maps used by the penalization.
    pub proj: Projections,
}

impl PenalizedOperator {
    /// Assembles `𝓛^p`. Grazing nodes and a non-positive `ν̄` are errors.
    pub fn new(op: &ReducedOperator, proj: Projections, gamma: f64, alpha: f64, beta: f64) -> Result<Self> {
        let n = op.len();
        let u = proj.u;
        let d: Vec<f64> = op.xi1.iter().map(|x| x + u).collect();
        if let Some(r) = d.iter().position(|v| v.abs() < GRAZING_TOL) {
            return Err(LabError::Grazing(format!("node {r} has ξ₁+u = {:e}", d[r])));
        }
        let nubar: Vec<f64> = (0..n).map(|i| op.nu[i] - gamma * d[i]).collect();
        if let Some(r) = nubar.iter().position(|v| !(*v > 0.0)) {
            return Err(invalid("pen.gamma", format!("ν̄ = {:e} ≤ 0 at node {r}", nubar[r])));
        }
        let mut matrix = op.l.clone();
        for i in 0..n {
            for k in 0..n {
                matrix[(i, k)] += alpha * proj.x_plus[i] * proj.flux_xp[k] - beta * proj.phi[i] * proj.flux_psi[k];
            }
            matrix[(i, i)] -= gamma * d[i];
        }
        Ok(Self {
            u,
            gamma,
            alpha,
            beta,
            d,
            nubar,
            matrix,
            proj,
        })
    }

    /// Number of reduced unknowns.
    pub fn len(&self) -> usize {
        self.d.len()
    }

    /// Whether the operator is empty.
    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    /// `𝓛^p g`.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVectorView::from_slice(g, g.len());
        (&self.matrix * v).iter().copied().collect()
    }

    /// `K^p g = ν̄g − 𝓛^p g`.
    pub fn apply_kp(&self, g: &[f64]) -> Vec<f64> {
        let a = self.apply(g);
        (0..g.len()).map(|i| self.nubar[i] * g[i] - a[i]).collect()
    }

    /// Indices with `ξ₁+u > 0`.
    pub fn inflow(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.d[i] > 0.0).collect()
    }

    /// Indices with `ξ₁+u < 0`.
    pub fn outflow(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.d[i] < 0.0).collect()
    }
}

/// Box scheme on the whole slab, factored once by sparse LU.
///
/// Unknowns are `g(x_j, ξ_r)` station-major. Rows: the inflow data at
/// `x = 0`, then for each cell
/// `D(g_{j+1} − g_j) + (Δ_j/2)𝓛^p(g_j + g_{j+1}) = (Δ_j/2)(S_j + S_{j+1})`,
/// then `g = 0` for the outgoing velocities at `x = L`.
pub struct DirectSolver {
    x: Vec<f64>,
    n: usize,
    inflow: Vec<usize>,
    lu: Lu<u32, f64>,
    nnz: usize,
}

impl std::fmt::Debug for DirectSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DirectSolver")
            .field("stations", &self.x.len())
            .field("n", &self.n)
            .field("nnz", &self.nnz)
            .finish()
    }
}

impl DirectSolver {
    /// Assembles and factors the coupled system on the stations `x`.
    pub fn new(pen: &PenalizedOperator, x: &[f64]) -> Result<Self> {
        let n = pen.len();
        let nx = x.len();
        if nx < 2 {
            return Err(invalid("space", "at least two stations are required"));
        }
        let cells = nx - 1;
        let m = nx * n;
        if m > u32::MAX as usize / 4 {
            return Err(invalid("space.n", "system too large for 32-bit indices"));
        }
        let inflow = pen.inflow();
        let outflow = pen.outflow();
        let n_in = inflow.len();
        let mut pos_in = vec![usize::MAX; n];
        for (p, &k) in inflow.iter().enumerate() {
            pos_in[k] = p;
        }
        let mut pos_out = vec![usize::MAX; n];
        for (p, &k) in outflow.iter().enumerate() {
            pos_out[k] = p;
        }
        let nnz = 2 * n * n * cells + n;
        let mut col_ptr: Vec<u32> = Vec::with_capacity(m + 1);
        let mut row_idx: Vec<u32> = Vec::with_capacity(nnz);
        let mut val: Vec<f64> = Vec::with_capacity(nnz);
        col_ptr.push(0);
        for j in 0..nx {
            for k in 0..n {
                if j == 0 && pos_in[k] != usize::MAX {
                    row_idx.push(pos_in[k] as u32);
                    val.push(1.0);
                }
                if j >= 1 {
                    let h = 0.5 * (x[j] - x[j - 1]);
                    let base = n_in + (j - 1) * n;
                    for i in 0..n {
                        row_idx.push((base + i) as u32);
                        val.push(h * pen.matrix[(i, k)] + if i == k { pen.d[i] } else { 0.0 });
                    }
                }
                if j < cells {
                    let h = 0.5 * (x[j + 1] - x[j]);
                    let base = n_in + j * n;
                    for i in 0..n {
                        row_idx.push((base + i) as u32);
                        val.push(h * pen.matrix[(i, k)] - if i == k { pen.d[i] } else { 0.0 });
                    }
                }
                if j == cells && pos_out[k] != usize::MAX {
                    row_idx.push((n_in + cells * n + pos_out[k]) as u32);
                    val.push(1.0);
                }
                col_ptr.push(row_idx.len() as u32);
            }
        }
        let nnz = val.len();
        let symbolic = SymbolicSparseColMat::new_checked(m, m, col_ptr, None, row_idx);
        let mat = SparseColMat::new(symbolic, val);
        let lu = mat.sp_lu().map_err(|_| LabError::Singular("penalized box system"))?;
        Ok(Self {
            x: x.to_vec(),
            n,
            inflow,
            lu,
            nnz,
        })
    }

    /// Stored entries of the assembled matrix.
    pub fn nnz(&self) -> usize {
        self.nnz
    }

    /// Solves for the source `S` (one row per station) and boundary data
    /// `g_b` (entries with `ξ₁+u ≤ 0` are ignored).
    pub fn solve(&self, source: &Field, g_b: &[f64]) -> Result<Field> {
        let (n, nx) = (self.n, self.x.len());
        if source.nx != nx || source.nv != n {
            return Err(LabError::DimensionMismatch {
                expected: nx * n,
                found: source.nx * source.nv,
            });
        }
        if g_b.len() != n {
            return Err(LabError::DimensionMismatch {
                expected: n,
                found: g_b.len(),
            });
        }
        let n_in = self.inflow.len();
        let m = nx * n;
        let mut rhs = Mat::<f64>::zeros(m, 1);
        for (p, &k) in self.inflow.iter().enumerate() {
            rhs[(p, 0)] = g_b[k];
        }
        for j in 0..nx - 1 {
            let h = 0.5 * (self.x[j + 1] - self.x[j]);
            let (a, b) = (source.row(j), source.row(j + 1));
            for i in 0..n {
                rhs[(n_in + j * n + i, 0)] = h * (a[i] + b[i]);
            }
        }
        let sol = faer::linalg::solvers::Solve::solve(&self.lu, &rhs);
        let data: Vec<f64> = (0..m).map(|i| sol[(i, 0)]).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Singular("penalized box system (non-finite solution)"));
        }
        Ok(Field { nx, nv: n, data })
    }
}

/// Outcome of [`source_iteration`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceIterationReport {
    /// Total sweeps.
    pub iterations: usize,
    /// Continuation values of `λ` actually used (`[1]` without continuation).
    pub lambda_path: Vec<f64>,
    /// Relative change of the last sweep.
    pub final_change: f64,
}

/// Sweeps `g ← T⁻¹(λK^p g + S)` until the relative sup change is below
/// `tol`, starting from `initial` (zero when `None`).
#[allow(clippy::too_many_arguments)]
fn sweep_to_convergence(
    pen: &PenalizedOperator,
    x: &[f64],
    source: &Field,
    inflow: &[f64],
    scheme: SweepScheme,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    initial: Option<Field>,
) -> std::result::Result<(Field, usize, f64), (Field, Vec<f64>)> {
    let n = pen.len();
    let mut g = initial.unwrap_or_else(|| Field::zeros(x.len(), n));
    let mut history = Vec::new();
    for it in 1..=max_iter {
        let rows: Vec<Vec<f64>> = (0..x.len())
            .into_par_iter()
            .map(|j| {
                let kg = pen.apply_kp(g.row(j));
                kg.iter().zip(source.row(j)).map(|(a, b)| lambda * a + b).collect()
            })
            .collect();
        let q = Field::from_rows(rows).expect("uniform rows");
        let next = match transport_sweep(x, &pen.d, &pen.nubar, &q, inflow, scheme) {
            Ok(f) => f,
            Err(_) => return Err((g, history)),
        };
        let change = next.max_abs_diff(&g).expect("same shape") / next.sup().max(f64::MIN_POSITIVE);
        history.push(change);
        g = next;
        if !change.is_finite() || (history.len() > 5 && change > 1e3 * history[0].max(1.0)) {
            return Err((g, history));
        }
        if change <= tol {
            return Ok((g, it, change));
        }
    }
    Err((g, history))
}

/// Solves the penalized linear problem by source iteration; on failure at
/// `λ = 1` it restarts with the continuation `λ = 1/steps, 2/steps, …, 1`,
/// each stage warm-started from the previous one.
#[allow(clippy::too_many_arguments)]
pub fn source_iteration(
    pen: &PenalizedOperator,
    x: &[f64],
    source: &Field,
    g_b: &[f64],
    scheme: SweepScheme,
    tol: f64,
    max_iter: usize,
    lambda_steps: usize,
) -> Result<(Field, SourceIterationReport)> {
    let inflow: Vec<f64> = (0..pen.len()).map(|i| if pen.d[i] > 0.0 { g_b[i] } else { 0.0 }).collect();
    match sweep_to_convergence(pen, x, source, &inflow, scheme, 1.0, tol, max_iter, None) {
        Ok((g, it, change)) => Ok((
            g,
            SourceIterationReport {
                iterations: it,
                lambda_path: vec![1.0],
                final_change: change,
            },
        )),
        Err((_, first_history)) => {
            let steps = lambda_steps.max(1);
            let mut total = first_history.len();
            let mut path = Vec::new();
            let mut g: Option<Field> = None;
            let mut last = f64::NAN;
            for s in 1..=steps {
                let lambda = s as f64 / steps as f64;
                path.push(lambda);
                match sweep_to_convergence(pen, x, source, &inflow, scheme, lambda, tol, max_iter, g.take()) {
                    Ok((next, it, change)) => {
                        total += it;
                        last = change;
                        g = Some(next);
                    }
                    Err((_, history)) => {
                        return Err(LabError::NoConvergence {
                            what: "source iteration",
                            iterations: total + history.len(),
                            residual: history.last().copied().unwrap_or(f64::NAN),
                            history,
                        })
                    }
                }
            }
            Ok((
                g.expect("at least one stage"),
                SourceIterationReport {
                    iterations: total,
                    lambda_path: path,
                    final_change: last,
                },
            ))
        }
    }
}

/// `h(x) = −e^{−γx}∫₀^∞ e^{(τ−2γ)z} G(x+z) dz` for `G` sampled at the
/// stations, by a backward exponential recursion exact for piecewise-linear
/// `G`; beyond `L` the last value is continued as a constant.
pub fn compute_h(x: &[f64], g_moment: &[f64], tau: f64, gamma: f64) -> Result<Vec<f64>> {
    if x.len() != g_moment.len() {
        return Err(LabError::DimensionMismatch {
            expected: x.len(),
            found: g_moment.len(),
        });
    }
    let a = 2.0 * gamma - tau;
    if !(a > 0.0) {
        return Err(invalid("pen.gamma", format!("τ − 2γ = {:e} must be negative", -a)));
    }
    let nx = x.len();
    let mut big_h = vec![0.0; nx];
    big_h[nx - 1] = g_moment[nx - 1] / a;
    for j in (0..nx - 1).rev() {
        let (e, w_up, w_down) = exp_linear_weights(a, x[j + 1] - x[j]);
        big_h[j] = e * big_h[j + 1] + w_up * g_moment[j + 1] + w_down * g_moment[j];
    }
    Ok(x.iter().zip(big_h).map(|(xj, hj)| -(-gamma * xj).exp() * hj).collect())
}

/// Linear backend for the penalized problem.
#[derive(Debug)]
pub enum LinearBackend {
    /// Factored box system.
    Direct(DirectSolver),
    /// Source iteration.
    Source {
        /// Sweep integrator.
        scheme: SweepScheme,
        /// Relative tolerance.
        tol: f64,
        /// Sweep cap per stage.
        max_iter: usize,
        /// Continuation stages.
        lambda_steps: usize,
    },
}

/// Penalized operator, space stations and linear backend.
#[derive(Debug)]
pub struct PenalizedSystem {
    /// Stations `x_0 = 0 < … < x_J = L`.
    pub x: Vec<f64>,
    /// Operator.
    pub pen: PenalizedOperator,
    /// Backend.
    pub backend: LinearBackend,
    /// Slow eigenvalue `τ_u`.
    pub tau: f64,
}

impl PenalizedSystem {
    /// Builds with the direct backend.
    pub fn direct(pen: PenalizedOperator, x: Vec<f64>, tau: f64) -> Result<Self> {
        let solver = DirectSolver::new(&pen, &x)?;
        Ok(Self {
            x,
            pen,
            backend: LinearBackend::Direct(solver),
            tau,
        })
    }

    /// Builds with the source-iteration backend.
    pub fn source(pen: PenalizedOperator, x: Vec<f64>, tau: f64, scheme: SweepScheme, tol: f64, max_iter: usize, lambda_steps: usize) -> Self {
        Self {
            x,
            pen,
            backend: LinearBackend::Source {
                scheme,
                tol,
                max_iter,
                lambda_steps,
            },
            tau,
        }
    }

    /// Solves the linear penalized problem.
    pub fn solve_linear(&self, source: &Field, g_b: &[f64]) -> Result<Field> {
        match &self.backend {
            LinearBackend::Direct(s) => s.solve(source, g_b),
            LinearBackend::Source {
                scheme,
                tol,
                max_iter,
                lambda_steps,
            } => source_iteration(&self.pen, &self.x, source, g_b, *scheme, *tol, *max_iter, *lambda_steps).map(|r| r.0),
        }
    }

    /// `f = e^{−γx}(g − hφ_u)`.
    pub fn reconstruct_f(&self, g: &Field, h: &[f64]) -> Field {
        let mut f = g.clone();
        for j in 0..g.nx {
            let e = (-self.pen.gamma * self.x[j]).exp();
            for (v, p) in f.row_mut(j).iter_mut().zip(&self.pen.proj.phi) {
                *v = e * (*v - h[j] * p);
            }
        }
        f
    }
}

/// Picard controls.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PicardOptions {
    /// Relative change at which the iteration stops.
    pub tol: f64,
    /// Iteration cap.
    pub max_iter: usize,
}

/// Converged nonlinear penalized solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonlinearSolution {
    /// `g`.
    pub g: Field,
    /// `h`.
    pub h: Vec<f64>,
    /// Boundary data `f_b` used.
    pub f_b: Vec<f64>,
    /// Picard iterations.
    pub iterations: usize,
    /// Relative change per iteration.
    pub history: Vec<f64>,
}

/// Source `e^{−γx}(𝓘 − P_u)Γ(F,F)` and `G = ⟨ψ_uΓ(F,F)⟩` for
/// `F = g − hφ_u`.
pub fn nonlinear_source(sys: &PenalizedSystem, gamma: &GammaEvaluator, g: &Field, h: &[f64]) -> Result<(Field, Vec<f64>)> {
    let proj = &sys.pen.proj;
    let out: Vec<(Vec<f64>, f64)> = (0..g.nx)
        .into_par_iter()
        .map(|j| -> Result<(Vec<f64>, f64)> {
            let f: Vec<f64> = g.row(j).iter().zip(&proj.phi).map(|(a, p)| a - h[j] * p).collect();
            let q = gamma.quadratic(&f)?;
            let gm: f64 = (0..q.len()).map(|i| proj.q[i] * proj.psi[i] * q[i]).sum();
            let e = (-sys.pen.gamma * sys.x[j]).exp();
            Ok(((0..q.len()).map(|i| e * (q[i] + gm * proj.flux_phi[i])).collect(), gm))
        })
        .collect::<Result<_>>()?;
    let (rows, gm): (Vec<Vec<f64>>, Vec<f64>) = out.into_iter().unzip();
    Ok((Field::from_rows(rows)?, gm))
}

/// Picard iteration for `(g, h)` with boundary data `f_b`, optionally warm
/// started. Aborts when the change grows past ten times the first one.
pub fn solve_nonlinear(
    sys: &PenalizedSystem,
    gamma: &GammaEvaluator,
    f_b: &[f64],
    opts: PicardOptions,
    warm: Option<(&Field, &[f64])>,
) -> Result<NonlinearSolution> {
    let n = sys.pen.len();
    let nx = sys.x.len();
    if f_b.len() != n {
        return Err(LabError::DimensionMismatch {
            expected: n,
            found: f_b.len(),
        });
    }
    let (mut g, mut h) = match warm {
        Some((g, h)) => (g.clone(), h.to_vec()),
        None => (Field::zeros(nx, n), vec![0.0; nx]),
    };
    let data_scale = f_b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut history = Vec::new();
    for it in 1..=opts.max_iter {
        let (source, gm) = nonlinear_source(sys, gamma, &g, &h)?;
        let h_next = compute_h(&sys.x, &gm, sys.tau, sys.pen.gamma)?;
        let g_b: Vec<f64> = (0..n).map(|i| f_b[i] + h_next[0] * sys.pen.proj.phi[i]).collect();
        let g_next = sys.solve_linear(&source, &g_b)?;
        let dh = h_next.iter().zip(&h).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = data_scale.max(g_next.sup()).max(f64::MIN_POSITIVE);
        let change = g_next.max_abs_diff(&g)?.max(dh) / scale;
        history.push(change);
        g = g_next;
        h = h_next;
        if !change.is_finite() || (it > 1 && change > 10.0 * history[0]) {
            return Err(LabError::Divergence {
                what: "Picard iteration",
                detail: format!("relative change history {history:?}"),
            });
        }
        if change <= opts.tol || data_scale == 0.0 {
            return Ok(NonlinearSolution {
                g,
                h,
                f_b: f_b.to_vec(),
                iterations: it,
                history,
            });
        }
    }
    Err(LabError::NoConvergence {
        what: "Picard iteration",
        iterations: opts.max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Boundary data `εe^{−|ξ|²} + a₁b₁ + a₂b₂` with two fixed Gaussian bumps
/// in `ξ₁` on the inflow side, invariant under the transverse reflections.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryFamily {
    /// `εe^{−|ξ|²}`.
    pub base: Vec<f64>,
    /// `b₁, b₂`.
    pub bumps: [Vec<f64>; 2],
}

impl BoundaryFamily {
    /// Bump centres in `ξ₁`.
    pub const CENTRES: [f64; 2] = [0.75, 2.0];
    /// Bump width in `ξ₁`.
    pub const WIDTH: f64 = 0.6;

    /// Bump `k` at a velocity.
    pub fn bump_at(k: usize, v: &[f64; 3]) -> f64 {
        (-((v[0] - Self::CENTRES[k]) / Self::WIDTH).powi(2) / 2.0 - (v[1] * v[1] + v[2] * v[2]) / 2.0).exp()
    }

    /// `f_b(a)` at any velocity.
    pub fn value_at(eps: f64, a: [f64; 2], v: &[f64; 3]) -> f64 {
        eps * (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).exp() + a[0] * Self::bump_at(0, v) + a[1] * Self::bump_at(1, v)
    }

    /// Samples the family on the reduced nodes.
    pub fn new(op: &ReducedOperator, eps: f64) -> Self {
        let base = op.nodes.iter().map(|v| Self::value_at(eps, [0.0, 0.0], v)).collect();
        let bump = |k: usize| -> Vec<f64> { op.nodes.iter().map(|v| Self::bump_at(k, v)).collect() };
        Self {
            base,
            bumps: [bump(0), bump(1)],
        }
    }

    /// `f_b(a)`.
    pub fn boundary(&self, a: [f64; 2]) -> Vec<f64> {
        (0..self.base.len())
            .map(|i| self.base[i] + a[0] * self.bumps[0][i] + a[1] * self.bumps[1][i])
            .collect()
    }
}

/// Result of [`tune_boundary`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TunedSolution {
    /// Bump amplitudes.
    pub coeffs: [f64; 2],
    /// Linear-response Jacobian of `(r₁, r₂)` in `(a₁, a₂)`.
    pub jacobian: [[f64; 2]; 2],
    /// `max(|r₁|, |r₂|)` after each nonlinear solve.
    pub residual_history: Vec<f64>,
    /// Final solution.
    pub solution: NonlinearSolution,
}

/// Adjusts the bump amplitudes until the two admissibility functionals of
/// `g(0)` vanish to `tol`, by chord iterations with the linear-response
/// Jacobian.
pub fn tune_boundary(
    sys: &PenalizedSystem,
    gamma: &GammaEvaluator,
    adm: &AdmissibilityData,
    family: &BoundaryFamily,
    tol: f64,
    max_iter: usize,
    opts: PicardOptions,
) -> Result<TunedSolution> {
    let n = sys.pen.len();
    let zero = Field::zeros(sys.x.len(), n);
    let mut jac = [[0.0; 2]; 2];
    for k in 0..2 {
        let resp = sys.solve_linear(&zero, &family.bumps[k])?;
        let (r1, r2) = adm.residual(resp.row(0));
        jac[0][k] = r1;
        jac[1][k] = r2;
    }
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    let size = jac.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(det.abs() > 1e-10 * size * size) {
        return Err(LabError::Singular("boundary tuning Jacobian"));
    }
    let mut a = [0.0; 2];
    let mut sol = solve_nonlinear(sys, gamma, &family.boundary(a), opts, None)?;
    let mut history = Vec::new();
    for _ in 0..=max_iter {
        let (r1, r2) = adm.residual(sol.g.row(0));
        history.push(r1.abs().max(r2.abs()));
        if r1.abs().max(r2.abs()) < tol {
            return Ok(TunedSolution {
                coeffs: a,
                jacobian: jac,
                residual_history: history,
                solution: sol,
            });
        }
        a[0] -= (jac[1][1] * r1 - jac[0][1] * r2) / det;
        a[1] -= (-jac[1][0] * r1 + jac[0][0] * r2) / det;
        sol = solve_nonlinear(sys, gamma, &family.boundary(a), opts, Some((&sol.g, &sol.h)))?;
    }
    Err(LabError::NoConvergence {
        what: "boundary tuning",
        iterations: max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Pointwise residuals of the reconstructed `f`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualReport {
    /// `max_r |(ξ₁+u)∂ₓf + 𝓛f − Γ(f,f) + e^{−γx}(αX₊m₊ − βm_ψφ_u)|` per
    /// interior station: the discrete consistency of the penalized system.
    pub penalized: Vec<f64>,
    /// Same without the penalty term: the residual of the original equation.
    pub original: Vec<f64>,
    /// Interior stations used.
    pub x: Vec<f64>,
    /// Sup of `penalized`.
    pub max_penalized: f64,
    /// Sup of `original`.
    pub max_original: f64,
}

/// Three-point derivative weights at `x_j` on a nonuniform grid.
pub fn fd_weights(x: &[f64], j: usize) -> [f64; 3] {
    let (hm, hp) = (x[j] - x[j - 1], x[j + 1] - x[j]);
    [-hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp))]
}

/// Evaluates [`ResidualReport`] with second-order differences at interior
/// stations.
pub fn residual_check(sys: &PenalizedSystem, op: &ReducedOperator, gamma: &GammaEvaluator, g: &Field, h: &[f64]) -> Result<ResidualReport> {
    let f = sys.reconstruct_f(g, h);
    let pen = &sys.pen;
    let proj = &pen.proj;
    let x = &sys.x;
    let rows: Vec<(f64, f64)> = (1..x.len() - 1)
        .into_par_iter()
        .map(|j| -> Result<(f64, f64)> {
            let w = fd_weights(x, j);
            let lf = op.apply_l(f.row(j));
            let q = gamma.quadratic(f.row(j))?;
            let gj = g.row(j);
            let m_plus: f64 = proj.flux_xp.iter().zip(gj).map(|(a, b)| a * b).sum();
            let m_psi: f64 = proj.flux_psi.iter().zip(gj).map(|(a, b)| a * b).sum();
            let e = (-pen.gamma * x[j]).exp();
            let (mut pm, mut om) = (0.0f64, 0.0f64);
            for i in 0..pen.len() {
                let df = w[0] * f.row(j - 1)[i] + w[1] * f.row(j)[i] + w[2] * f.row(j + 1)[i];
                let orig = pen.d[i] * df + lf[i] - q[i];
                let pent = e * (pen.alpha * proj.x_plus[i] * m_plus - pen.beta * m_psi * proj.phi[i]);
                om = om.max(orig.abs());
                pm = pm.max((orig + pent).abs());
            }
            Ok((pm, om))
        })
        .collect::<Result<_>>()?;
    let (penalized, original): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    Ok(ResidualReport {
        max_penalized: penalized.iter().fold(0.0, |m, v| m.max(*v)),
        max_original: original.iter().fold(0.0, |m, v| m.max(*v)),
        penalized,
        original,
        x: x[1..x.len() - 1].to_vec(),
    })
}

/// Penalty moments `(⟨(ξ₁+u)X₊g⟩, ⟨(ξ₁+u)ψ_u g⟩)` at every station.
pub fn penalty_moments(proj: &Projections, g: &Field) -> Vec<[f64; 2]> {
    g.rows()
        .map(|r| {
            [
                proj.flux_xp.iter().zip(r).map(|(a, b)| a * b).sum(),
                proj.flux_psi.iter().zip(r).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_sweep_is_exact_for_constant_source() {
        let x: Vec<f64> = (0..=20).map(|j| 0.1 * j as f64).collect();
        let d = [0.5, -0.8];
        let nubar = [2.0, 3.0];
        let src = Field::from_rows(vec![vec![1.0, 1.0]; x.len()]).unwrap();
        let g = transport_sweep(&x, &d, &nubar, &src, &[1.5, 0.2], SweepScheme::Exponential).unwrap();
        for (j, &xj) in x.iter().enumerate() {
            let a = 0.5 + (1.5 - 0.5) * (-4.0 * xj).exp();
            let b = 1.0 / 3.0 + (0.2 - 1.0 / 3.0) * (-3.0 / 0.8 * (2.0 - xj)).exp();
            assert!((g.row(j)[0] - a).abs() < 1e-13);
            assert!((g.row(j)[1] - b).abs() < 1e-13);
        }
    }

    #[test]
    fn box_sweep_is_second_order() {
        let err = |cells: usize| {
            let x: Vec<f64> = (0..=cells).map(|j| j as f64 / cells as f64).collect();
            let src = Field::from_rows(x.iter().map(|xj| vec![xj.sin()]).collect()).unwrap();
            let g = transport_sweep(&x, &[1.0], &[1.0], &src, &[0.0], SweepScheme::Box).unwrap();
            // g′ + g = sin x, g(0) = 0.
            let exact = |t: f64| 0.5 * (t.sin() - t.cos() + (-t).exp());
            x.iter().enumerate().fold(0.0f64, |m, (j, &t)| m.max((g.row(j)[0] - exact(t)).abs()))
        };
        let ratio = err(20) / err(40);
        assert!((ratio - 4.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn grazing_velocity_takes_local_equilibrium() {
        let x = [0.0, 1.0, 2.0];
        let src = Field::from_rows(vec![vec![2.0]; 3]).unwrap();
        let g = transport_sweep(&x, &[0.0], &[4.0], &src, &[9.0], SweepScheme::Exponential).unwrap();
        assert_eq!(g.data, vec![0.5; 3]);
        assert!(transport_sweep(&x, &[1.0], &[0.0], &src, &[0.0], SweepScheme::Box).is_err());
    }

    #[test]
    fn h_satisfies_its_differential_identity() {
        let x: Vec<f64> = (0..=4000).map(|j| 0.01 * j as f64).collect();
        let (tau, gamma) = (-0.15, 0.02);
        let gm: Vec<f64> = x.iter().map(|t| (-t).exp()).collect();
        let h = compute_h(&x, &gm, tau, gamma).unwrap();
        // Closed form: H = e^{−x}/(a − 1) with a = 2γ − τ.
        let a = 2.0 * gamma - tau;
        for j in [0, 100, 1000] {
            let exact = -(-gamma * x[j]).exp() * (-x[j]).exp() / (1.0 + a);
            assert!((h[j] - exact).abs() < 1e-5 * exact.abs(), "{} {}", h[j], exact);
        }
        for j in 1..200 {
            let dh = (h[j + 1] - h[j - 1]) / (x[j + 1] - x[j - 1]);
            let rhs = (gamma - tau) * h[j] + (-gamma * x[j]).exp() * gm[j];
            assert!((dh - rhs).abs() < 1e-4);
        }
        assert!(compute_h(&x, &gm, 0.1, 0.02).is_err());
    }

    #[test]
    fn fd_weights_differentiate_quadratics() {
        let x = [0.0, 0.3, 1.0];
        let w = fd_weights(&x, 1);
        let d: f64 = x.iter().zip(w).map(|(t, c)| c * (t * t + 2.0 * t)).sum();
        assert!((d - (2.0 * 0.3 + 2.0)).abs() < 1e-13);
    }
}
