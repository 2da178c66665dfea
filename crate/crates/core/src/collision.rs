//! Hard-sphere linearized collision operator: frequency `ν`, Grad kernel
//! `k = c₁k₁ + c₂k₂`, the operators `K` and `𝓛 = ν − K` on the full grid and
//! on the D4 orbit space, the weighted-kernel bound table, and a Monte Carlo
//! cross-check of `K` against the defining collision integrals.

use crate::config::KernelConstants;
use crate::error::{LabError, Result};
use crate::grids::{sqrt_maxwellian, VelocityGrid};
use crate::quadrature::{adaptive, adaptive_pts};
use crate::scalar::{dist, norm2, Real};
use crate::symmetry::OrbitSpace;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Signed Grad coefficients: `k(ξ, ξ′) = c₁·k₁(ξ, ξ′) + c₂·k₂(ξ, ξ′)` with
/// `k₁ = |ξ−ξ′| e^{−(|ξ|²+|ξ′|²)/4}` and
/// `k₂ = |ξ−ξ′|^{−1} e^{−|ξ−ξ′|²/8 − (|ξ|²−|ξ′|²)²/(8|ξ−ξ′|²)}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradConstants {
    /// Coefficient of `k₁` (negative for the hard-sphere operator).
    pub c1: f64,
    /// Coefficient of `k₂`.
    pub c2: f64,
    /// Mode tag.
    pub mode: KernelConstants,
}

impl GradConstants {
    /// Hard-sphere values for `M = (2π)^{−3/2}e^{−|v|²/2}` and cross-section
    /// `|V·ω|` over the full sphere: `c₁ = −1/√(2π)`, `c₂ = 4/√(2π)`.
    pub fn physical() -> Self {
        let s = TWO_PI.sqrt();
        Self {
            c1: -1.0 / s,
            c2: 4.0 / s,
            mode: KernelConstants::Physical,
        }
    }

    /// Model kernel with unit constants, `k = k₁ + k₂`.
    pub fn normalized() -> Self {
        Self {
            c1: 1.0,
            c2: 1.0,
            mode: KernelConstants::Normalized,
        }
    }

    /// Constants for a mode.
    pub fn from_mode(mode: KernelConstants) -> Self {
        match mode {
            KernelConstants::Physical => Self::physical(),
            KernelConstants::Normalized => Self::normalized(),
        }
    }

    /// Whether the kernel built from these constants is pointwise nonnegative.
    pub fn is_nonnegative(&self) -> bool {
        self.c1 >= 0.0 && self.c2 >= 0.0
    }
}

/// `k₁(ξ, ξ′)`.
#[inline]
pub fn k1<T: Real>(xi: &[T; 3], xj: &[T; 3]) -> T {
    dist(xi, xj) * (-(norm2(xi) + norm2(xj)) * T::lit(0.25)).exp()
}

/// `k₂(ξ, ξ′)` for `ξ ≠ ξ′`.
#[inline]
pub fn k2<T: Real>(xi: &[T; 3], xj: &[T; 3]) -> T {
    let d = [xi[0] - xj[0], xi[1] - xj[1], xi[2] - xj[2]];
    let r2 = norm2(&d);
    let e = norm2(xi) - norm2(xj);
    let eighth = T::lit(0.125);
    (-(r2 * eighth) - e * e * eighth / r2).exp() / r2.sqrt()
}

/// Grad kernel `c₁k₁ + c₂k₂`; coincident points are an error and must go
/// through [`self_cell_k2`].
pub fn grad_kernel<T: Real>(xi: &[T; 3], xj: &[T; 3], c: &GradConstants) -> Result<T> {
    if xi == xj {
        return Err(LabError::InvalidParameter {
            name: "ξ′",
            reason: "coincident points: use the self-cell regularization".into(),
        });
    }
    Ok(T::lit(c.c1) * k1(xi, xj) + T::lit(c.c2) * k2(xi, xj))
}

/// Upper envelope `|c₁|k₁ + |c₂|k₂ ≥ |k|` used for bound tables.
#[inline]
pub fn kernel_envelope<T: Real>(xi: &[T; 3], xj: &[T; 3], c: &GradConstants) -> T {
    T::lit(c.c1.abs()) * k1(xi, xj) + T::lit(c.c2.abs()) * k2(xi, xj)
}

/// Directional average `½∫_{−1}^{1} e^{−s²c²/2} dc = √(π/2)·erf(s/√2)/s`.
fn directional_average(s: f64) -> f64 {
    if s < 1e-8 {
        return 1.0;
    }
    adaptive(|c: f64| (-0.5 * s * s * c * c).exp(), 0.0, 1.0, 1e-14, 1e-13, 64).value
}

/// `∫_{cell} k₂(ξ, ξ′) dξ′` over a ball of volume `vol` centred at `ξ`,
/// using the near-diagonal form `k₂ ≈ e^{−(ξ·n)²/2}/|ξ−ξ′|` (with `n` the
/// direction of `ξ′−ξ`), which integrates to `2πR²·avg(|ξ|)`.
pub fn self_cell_k2(xi: &[f64; 3], vol: f64) -> f64 {
    let r = (3.0 * vol / (4.0 * std::f64::consts::PI)).cbrt();
    TWO_PI * r * r * directional_average(norm2(xi).sqrt())
}

/// Collision frequency `ν(ξ) = 2π∫M(ξ_*)|ξ−ξ_*|dξ_*` through the exact
/// radial reduction
/// `ν(s) = √(2π)·∫₀^∞ r² e^{−r²/2} [(s+r)³ − |s−r|³]/(3sr) dr`.
pub fn collision_frequency<T: Real>(xi: &[T; 3]) -> T {
    let s = norm2(xi).sqrt().to_f64_lossy();
    T::lit(nu_radial(s))
}

/// Radial form of [`collision_frequency`].
pub fn nu_radial(s: f64) -> f64 {
    let pref = TWO_PI.sqrt();
    let f = |r: f64| {
        let shell = if s < 1e-10 {
            2.0 * r
        } else {
            ((s + r).powi(3) - (s - r).abs().powi(3)) / (3.0 * s * r.max(1e-300))
        };
        r * r * (-0.5 * r * r).exp() * shell
    };
    let top = s + 14.0;
    let pts = if s > 0.0 { vec![0.0, s, top] } else { vec![0.0, top] };
    pref * adaptive_pts(f, &pts, 1e-14, 1e-14, 200).value
}

/// Full-grid collision operator.
#[derive(Clone, Debug)]
pub struct CollisionOperator {
    /// Number of velocity nodes.
    pub n: usize,
    /// `ν(ξ_i)`.
    pub nu: Vec<f64>,
    /// Row-major `k(ξ_i, ξ_j)·q_j` with the self-cell value on the diagonal.
    pub kq: Vec<f64>,
    /// Quadrature weights.
    pub q: Vec<f64>,
    /// Grad constants.
    pub constants: GradConstants,
    /// `min_i ν_i/(1+|ξ_i|)`.
    pub nu0: f64,
    /// `max_i ν_i/(1+|ξ_i|)`.
    pub nu1: f64,
}

/// One kernel row `j ↦ k(ξ_i, ξ_j)q_j` including the self cell.
fn kernel_row<T: Real>(grid: &VelocityGrid<T>, i: usize, c: &GradConstants) -> Vec<f64> {
    let xi = to64(&grid.nodes[i]);
    (0..grid.len())
        .map(|j| {
            let xj = to64(&grid.nodes[j]);
            let qj = grid.weights[j].to_f64_lossy();
            if i == j {
                c.c2 * self_cell_k2(&xi, qj)
            } else {
                (c.c1 * k1(&xi, &xj) + c.c2 * k2(&xi, &xj)) * qj
            }
        })
        .collect()
}

/// Kernel row `k(v, ξ_j)q_j` at an arbitrary velocity `v`, folded onto the
/// orbit space. Partners closer than their cell radius `R_j` (the ball of
/// volume `q_j`) use the ball potential `2π(R_j² − r²/3)` in place of
/// `q_j/r`; a coincident node uses [`self_cell_k2`]. At a grid node the row
/// equals the folded row of the assembled operator.
pub fn kernel_row_at<T: Real>(grid: &VelocityGrid<T>, orbits: &OrbitSpace, v: &[f64; 3], c: &GradConstants) -> Vec<f64> {
    let mut out = vec![0.0; orbits.len()];
    for j in 0..grid.len() {
        let xj = to64(&grid.nodes[j]);
        let qj = grid.weights[j].to_f64_lossy();
        let r = dist(v, &xj);
        let value = if r == 0.0 {
            c.c2 * self_cell_k2(v, qj)
        } else {
            let radius = (3.0 * qj / (4.0 * std::f64::consts::PI)).cbrt();
            let potential = if r >= radius {
                qj / r
            } else {
                TWO_PI * (radius * radius - r * r / 3.0)
            };
            c.c1 * k1(v, &xj) * qj + c.c2 * k2(v, &xj) * r * potential
        };
        out[orbits.full_to_red[j]] += value;
    }
    out
}

fn to64<T: Real>(v: &[T; 3]) -> [f64; 3] {
    [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()]
}

/// Frequency bounds `(ν₀, ν₁)` on a grid.
pub fn frequency_bounds(nodes: &[[f64; 3]], nu: &[f64]) -> (f64, f64) {
    nodes
        .iter()
        .zip(nu)
        .map(|(x, &v)| v / (1.0 + norm2(x).sqrt()))
        .fold((f64::INFINITY, 0.0), |(lo, hi), r| (lo.min(r), hi.max(r)))
}

/// The five collision invariants `√M, ξ₁√M, ξ₂√M, ξ₃√M, |ξ|²√M` on a grid.
pub fn collision_invariants<T: Real>(grid: &VelocityGrid<T>) -> [Vec<f64>; 5] {
    let nodes: Vec<[f64; 3]> = grid.nodes.iter().map(to64).collect();
    let f = |g: &dyn Fn(&[f64; 3]) -> f64| -> Vec<f64> {
        nodes.iter().map(|v| g(v) * sqrt_maxwellian(v)).collect()
    };
    [
        f(&|_| 1.0),
        f(&|v| v[0]),
        f(&|v| v[1]),
        f(&|v| v[2]),
        f(&|v| norm2(v)),
    ]
}

impl CollisionOperator {
    /// Assembles `ν` and the weighted kernel matrix (rows in parallel,
    /// collected in order).
    pub fn assemble<T: Real>(grid: &VelocityGrid<T>, constants: GradConstants) -> Self {
        let n = grid.len();
        let nodes: Vec<[f64; 3]> = grid.nodes.iter().map(to64).collect();
        let nu: Vec<f64> = nodes.par_iter().map(collision_frequency).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| kernel_row(grid, i, &constants))
            .collect();
        let kq = rows.concat();
        let (nu0, nu1) = frequency_bounds(&nodes, &nu);
        Self {
            n,
            nu,
            kq,
            q: grid.weights.iter().map(|w| w.to_f64_lossy()).collect(),
            constants,
            nu0,
            nu1,
        }
    }

    fn check(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.n {
            return Err(LabError::DimensionMismatch {
                expected: self.n,
                found: f.len(),
            });
        }
        Ok(())
    }

    /// `Kf`.
    pub fn apply_k(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check(f)?;
        Ok(self
            .kq
            .par_chunks(self.n)
            .map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `𝓛f = νf − Kf`.
    pub fn apply_l(&self, f: &[f64]) -> Result<Vec<f64>> {
        let kf = self.apply_k(f)?;
        Ok(self.nu.iter().zip(f).zip(kf).map(|((v, x), k)| v * x - k).collect())
    }

    /// `⟨f, 𝓛f⟩`.
    pub fn quadratic_form(&self, f: &[f64]) -> Result<f64> {
        let lf = self.apply_l(f)?;
        Ok(f.iter().zip(&lf).zip(&self.q).map(|((a, b), q)| q * a * b).sum())
    }

    /// `‖𝓛·inv‖₂/‖inv‖₂` for each of the five collision invariants (raw
    /// operator, no conservative correction).
    pub fn ker_residuals<T: Real>(&self, grid: &VelocityGrid<T>) -> Result<[f64; 5]> {
        let inv = collision_invariants(grid);
        let mut out = [0.0; 5];
        for (o, f) in out.iter_mut().zip(inv.iter()) {
            let lf = self.apply_l(f)?;
            let num: f64 = lf.iter().zip(&self.q).map(|(x, q)| q * x * x).sum();
            let den: f64 = f.iter().zip(&self.q).map(|(x, q)| q * x * x).sum();
            *o = (num / den).sqrt();
        }
        Ok(out)
    }
}

/// One line of the weighted-kernel bound table.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KernelBoundRow {
    /// Node index.
    pub node: usize,
    /// `|ξ_i|`.
    pub speed: f64,
    /// `(1+|ξ_i|)·Σ_j |k_θ(ξ_i, ξ_j)| q_j`.
    pub value: f64,
}

/// `(1+|ξ_i|)·Σ_j |k(ξ_i, ξ_j)| w_θ(ξ_i)/w_θ(ξ_j) q_j` for every node,
/// using the envelope `|c₁|k₁ + |c₂|k₂` and the self-cell value on the
/// diagonal. Rows are computed on the fly.
pub fn k_theta_bound_table<T: Real>(
    grid: &VelocityGrid<T>,
    constants: &GradConstants,
    theta: f64,
) -> Vec<KernelBoundRow> {
    let nodes: Vec<[f64; 3]> = grid.nodes.iter().map(to64).collect();
    let q: Vec<f64> = grid.weights.iter().map(|w| w.to_f64_lossy()).collect();
    (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            let xi = &nodes[i];
            let wi = (theta * norm2(xi)).exp();
            let mut s = 0.0;
            for (j, xj) in nodes.iter().enumerate() {
                let v = if i == j {
                    constants.c2.abs() * self_cell_k2(xi, q[j])
                } else {
                    kernel_envelope(xi, xj, constants) * q[j]
                };
                s += v * wi / (theta * norm2(xj)).exp();
            }
            let speed = norm2(xi).sqrt();
            KernelBoundRow {
                node: i,
                speed,
                value: (1.0 + speed) * s,
            }
        })
        .collect()
}

/// Collision operator on the D4 orbit space with the optional conservative
/// correction `𝓛_c = P⊥𝓛P⊥` (`P⊥` removes the discrete invariants
/// `√M, ξ₁√M, |ξ|²√M` in the `Q`-weighted inner product).
#[derive(Clone, Debug)]
pub struct ReducedOperator {
    /// Orbit space.
    pub orbits: OrbitSpace,
    /// Orbit weights `Q_r`.
    pub q: Vec<f64>,
    /// Representative velocities.
    pub nodes: Vec<[f64; 3]>,
    /// `ξ₁` at each orbit.
    pub xi1: Vec<f64>,
    /// `ν` at each orbit.
    pub nu: Vec<f64>,
    /// Raw folded kernel `K_f[I][J] = Σ_{j∈J} k(ξ_I, ξ_j)q_j`, symmetrized in
    /// the `Q` inner product.
    pub k_raw: DMatrix<f64>,
    /// `𝓛` actually used by the solvers (corrected or raw).
    pub l: DMatrix<f64>,
    /// `Q`-orthonormal basis of the discrete invariants (columns).
    pub invariants: DMatrix<f64>,
    /// Whether the conservative correction is applied.
    pub conservative: bool,
    /// Grad constants.
    pub constants: GradConstants,
    /// Frequency bounds on the grid.
    pub nu0: f64,
    /// Upper frequency bound.
    pub nu1: f64,
}

impl ReducedOperator {
    /// Assembles the folded operator. Each orbit row sums the kernel over
    /// every full-grid node, so the result equals the restriction of the full
    /// operator to D4-invariant fields.
    pub fn assemble<T: Real>(
        grid: &VelocityGrid<T>,
        constants: GradConstants,
        conservative: bool,
    ) -> Self {
        let orbits = OrbitSpace::new(grid);
        let n = orbits.len();
        let nodes: Vec<[f64; 3]> = (0..n).map(|r| orbits.node(grid, r)).collect();
        let nu: Vec<f64> = nodes.par_iter().map(collision_frequency).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|r| {
                let full = kernel_row(grid, orbits.rep[r], &constants);
                let mut folded = vec![0.0; n];
                for (j, v) in full.into_iter().enumerate() {
                    folded[orbits.full_to_red[j]] += v;
                }
                folded
            })
            .collect();
        let q = orbits.weights.clone();
        let mut k = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (q[i] * k[(i, j)] + q[j] * k[(j, i)]);
                k[(i, j)] = s / q[i];
                k[(j, i)] = s / q[j];
            }
        }
        let xi1 = nodes.iter().map(|v| v[0]).collect();
        let (nu0, nu1) = frequency_bounds(&nodes, &nu);
        let mut op = Self {
            q,
            xi1,
            k_raw: k,
            l: DMatrix::zeros(n, n),
            invariants: DMatrix::zeros(n, 3),
            conservative,
            constants,
            nu0,
            nu1,
            nodes,
            nu,
            orbits,
        };
        op.invariants = op.invariant_basis();
        op.l = op.build_l();
        op
    }

    /// Number of reduced unknowns.
    pub fn len(&self) -> usize {
        self.q.len()
    }

    /// Whether the operator is empty.
    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// `Q`-weighted inner product.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.q).map(|((x, y), w)| w * x * y).sum()
    }

    fn invariant_basis(&self) -> DMatrix<f64> {
        let n = self.len();
        let raw: Vec<Vec<f64>> = vec![
            self.nodes.iter().map(sqrt_maxwellian).collect(),
            self.nodes.iter().map(|v| v[0] * sqrt_maxwellian(v)).collect(),
            self.nodes.iter().map(|v| norm2(v) * sqrt_maxwellian(v)).collect(),
        ];
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for mut v in raw {
            for _ in 0..2 {
                for b in &basis {
                    let c = self.inner(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
            }
            let nrm = self.inner(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= nrm);
            basis.push(v);
        }
        DMatrix::from_fn(n, 3, |i, k| basis[k][i])
    }

    fn raw_l(&self) -> DMatrix<f64> {
        let mut l = -self.k_raw.clone();
        for i in 0..self.len() {
            l[(i, i)] += self.nu[i];
        }
        l
    }

    fn build_l(&self) -> DMatrix<f64> {
        let l = self.raw_l();
        if !self.conservative {
            return l;
        }
        let n = self.len();
        // P⊥ = I − E Eᵀ Q.
        let e = &self.invariants;
        let mut etq = e.transpose();
        for k in 0..3 {
            for i in 0..n {
                etq[(k, i)] *= self.q[i];
            }
        }
        let p = DMatrix::<f64>::identity(n, n) - e * &etq;
        let mut lc = &p * l * &p;
        // Restore exact Q-symmetry lost to round-off.
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (self.q[i] * lc[(i, j)] + self.q[j] * lc[(j, i)]);
                lc[(i, j)] = s / self.q[i];
                lc[(j, i)] = s / self.q[j];
            }
        }
        lc
    }

    /// `𝓛g` with the operator used by the solvers.
    pub fn apply_l(&self, g: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVectorView::from_slice(g, g.len());
        (&self.l * v).iter().copied().collect()
    }

    /// `Kg = νg − 𝓛g` consistent with [`Self::apply_l`].
    pub fn apply_k(&self, g: &[f64]) -> Vec<f64> {
        let lg = self.apply_l(g);
        self.nu.iter().zip(g).zip(lg).map(|((v, x), l)| v * x - l).collect()
    }

    /// `𝓛` without the conservative correction.
    pub fn apply_l_raw(&self, g: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVectorView::from_slice(g, g.len());
        (self.raw_l() * v).iter().copied().collect()
    }

    /// Projects out the discrete invariants: `P⊥g`.
    pub fn project_out_invariants(&self, g: &[f64]) -> Vec<f64> {
        let mut out = g.to_vec();
        for k in 0..3 {
            let col: Vec<f64> = self.invariants.column(k).iter().copied().collect();
            let c = self.inner(g, &col);
            out.iter_mut().zip(&col).for_each(|(o, e)| *o -= c * e);
        }
        out
    }

    /// Writes the operator to a binary cache file tagged with `hash`.
    pub fn save(&self, path: &Path, hash: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"KLOP1")?;
        f.write_all(&(hash.len() as u64).to_le_bytes())?;
        f.write_all(hash.as_bytes())?;
        let n = self.len();
        f.write_all(&(n as u64).to_le_bytes())?;
        for v in self.nu.iter().chain(self.k_raw.as_slice()) {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Loads a cached kernel if its tag matches; `Ok(None)` on mismatch.
    pub fn load<T: Real>(
        path: &Path,
        hash: &str,
        grid: &VelocityGrid<T>,
        constants: GradConstants,
        conservative: bool,
    ) -> Result<Option<Self>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |k: usize| -> Option<&[u8]> {
            let s = bytes.get(pos..pos + k)?;
            pos += k;
            Some(s)
        };
        let u64_of = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize;
        if take(5) != Some(b"KLOP1".as_slice()) {
            return Ok(None);
        }
        let Some(hl) = take(8).map(u64_of) else { return Ok(None) };
        if take(hl) != Some(hash.as_bytes()) {
            return Ok(None);
        }
        let Some(n) = take(8).map(u64_of) else { return Ok(None) };
        let mut vals = Vec::with_capacity(n + n * n);
        for _ in 0..(n + n * n) {
            let Some(s) = take(8) else { return Ok(None) };
            vals.push(f64::from_le_bytes(s.try_into().expect("8 bytes")));
        }
        let orbits = OrbitSpace::new(grid);
        if orbits.len() != n {
            return Ok(None);
        }
        let nodes: Vec<[f64; 3]> = (0..n).map(|r| orbits.node(grid, r)).collect();
        let nu = vals[..n].to_vec();
        let k_raw = DMatrix::from_column_slice(n, n, &vals[n..]);
        let (nu0, nu1) = frequency_bounds(&nodes, &nu);
        let mut op = Self {
            q: orbits.weights.clone(),
            xi1: nodes.iter().map(|v| v[0]).collect(),
            nodes,
            nu,
            k_raw,
            l: DMatrix::zeros(n, n),
            invariants: DMatrix::zeros(n, 3),
            conservative,
            constants,
            nu0,
            nu1,
            orbits,
        };
        op.invariants = op.invariant_basis();
        op.l = op.build_l();
        Ok(Some(op))
    }

    /// Loads from `dir` when a matching cache exists, else assembles and
    /// stores.
    pub fn assemble_cached<T: Real>(
        dir: &Path,
        hash: &str,
        grid: &VelocityGrid<T>,
        constants: GradConstants,
        conservative: bool,
    ) -> Result<Self> {
        let path = dir.join(format!("operator-{}.bin", &hash[..16.min(hash.len())]));
        if path.exists() {
            if let Some(op) = Self::load(&path, hash, grid, constants, conservative)? {
                return Ok(op);
            }
        }
        let op = Self::assemble(grid, constants, conservative);
        std::fs::create_dir_all(dir)?;
        op.save(&path, hash)?;
        Ok(op)
    }
}

/// Result of the Monte Carlo cross-check of one kernel row.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KValidation {
    /// Velocity at which the row is tested.
    pub xi: [f64; 3],
    /// `(Kf)(ξ)` from the Grad kernel, by accurate quadrature.
    pub grad: f64,
    /// `(Kf)(ξ)` from the grid row (the assembled operator).
    pub grid: f64,
    /// Monte Carlo estimate from the collision integrals.
    pub direct: f64,
    /// 95% confidence half-width of `direct`.
    pub ci95: f64,
    /// `|grad − direct|/|direct|`.
    pub rel_error: f64,
    /// `|grid − direct|/|direct|`.
    pub rel_error_grid: f64,
    /// Number of samples.
    pub samples: usize,
    /// Whether agreement is expected (physical constants only).
    pub expected_to_match: bool,
}

/// Test function used by the row check: `f(v) = e^{−|v−a|²/2}`.
fn test_function(v: &[f64; 3]) -> f64 {
    let a = [0.5, -0.3, 0.2];
    (-0.5 * ((v[0] - a[0]).powi(2) + (v[1] - a[1]).powi(2) + (v[2] - a[2]).powi(2))).exp()
}

/// `∫k(ξ, ξ′)f(ξ′)dξ′` by spherical product quadrature centred at `ξ`
/// (the `r²` Jacobian cancels the `1/r` singularity).
pub fn grad_row_quadrature(xi: &[f64; 3], c: &GradConstants, f: impl Fn(&[f64; 3]) -> f64) -> f64 {
    let (rn, rw) = crate::quadrature::gauss_legendre(48);
    let (cn, cw) = crate::quadrature::gauss_legendre(32);
    let nphi = 48;
    let r_max = 16.0;
    let mut total = 0.0;
    for (panel_lo, panel_hi) in [(0.0, 2.0), (2.0, 6.0), (6.0, r_max)] {
        let (h, m) = (0.5 * (panel_hi - panel_lo), 0.5 * (panel_hi + panel_lo));
        for (t, wt) in rn.iter().zip(&rw) {
            let r = m + h * t;
            let mut shell = 0.0;
            for (ct, wc) in cn.iter().zip(&cw) {
                let st = (1.0 - ct * ct).sqrt();
                for k in 0..nphi {
                    let phi = TWO_PI * (k as f64 + 0.5) / nphi as f64;
                    let d = [r * st * phi.cos(), r * st * phi.sin(), r * ct];
                    let xj = [xi[0] + d[0], xi[1] + d[1], xi[2] + d[2]];
                    let kv = c.c1 * k1(xi, &xj) + c.c2 * k2(xi, &xj);
                    shell += wc * kv * f(&xj);
                }
            }
            total += wt * h * r * r * shell * TWO_PI / nphi as f64;
        }
    }
    total
}

/// Monte Carlo evaluation of `(Kf)(v)` from the collision integrals
/// `K f = K₂f − K₁f` with
/// `K₁f(v) = ∫∫|V·ω|√M(v)√M(v_*)f(v_*)`,
/// `K₂f(v) = ∫∫|V·ω|√M(v_*)[√M(v_*′)f(v′) + √M(v′)f(v_*′)]`;
/// `v_* ~ N(0, 2I)` absorbs `√M(v_*)` and `ω` is uniform on the sphere.
/// Returns `(mean, ci95)`.
pub fn direct_q_row(v: &[f64; 3], f: impl Fn(&[f64; 3]) -> f64, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cp = (4.0 * std::f64::consts::PI).powf(1.5) / TWO_PI.powf(0.75);
    let scale = cp * 4.0 * std::f64::consts::PI;
    let sqm_v = sqrt_maxwellian(v);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let g = |r: &mut ChaCha8Rng| -> f64 {
            // Box–Muller with variance 2.
            let u1: f64 = r.random::<f64>().max(1e-300);
            let u2: f64 = r.random();
            (-2.0 * u1.ln()).sqrt() * (TWO_PI * u2).cos() * std::f64::consts::SQRT_2
        };
        let vs = [g(&mut rng), g(&mut rng), g(&mut rng)];
        let cz: f64 = 2.0 * rng.random::<f64>() - 1.0;
        let ph: f64 = TWO_PI * rng.random::<f64>();
        let sz = (1.0 - cz * cz).max(0.0).sqrt();
        let om = [sz * ph.cos(), sz * ph.sin(), cz];
        let rel = [v[0] - vs[0], v[1] - vs[1], v[2] - vs[2]];
        let vn = rel[0] * om[0] + rel[1] * om[1] + rel[2] * om[2];
        let vp = [v[0] - vn * om[0], v[1] - vn * om[1], v[2] - vn * om[2]];
        let vsp = [vs[0] + vn * om[0], vs[1] + vn * om[1], vs[2] + vn * om[2]];
        let val = vn.abs()
            * (sqrt_maxwellian(&vsp) * f(&vp) + sqrt_maxwellian(&vp) * f(&vsp) - sqm_v * f(&vs))
            * scale;
        sum += val;
        sum2 += val * val;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Compares the Grad-kernel `K` against the direct collision integrals at
/// the given grid rows, applying both to a fixed smooth test function.
pub fn validate_k_against_q<T: Real>(
    grid: &VelocityGrid<T>,
    constants: &GradConstants,
    rows: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<KValidation>> {
    if samples < 1000 {
        return Err(LabError::InvalidParameter {
            name: "samples",
            reason: format!("budget {samples} is below the minimum of 1000"),
        });
    }
    rows.iter()
        .map(|&i| {
            let xi = to64(&grid.nodes[i]);
            let grad = grad_row_quadrature(&xi, constants, test_function);
            let row = kernel_row(grid, i, constants);
            let gridv: f64 = grid
                .nodes
                .iter()
                .zip(&row)
                .map(|(x, k)| k * test_function(&to64(x)))
                .sum();
            let (direct, ci95) = direct_q_row(&xi, test_function, samples, seed ^ (i as u64));
            Ok(KValidation {
                xi,
                grad,
                grid: gridv,
                direct,
                ci95,
                rel_error: (grad - direct).abs() / direct.abs(),
                rel_error_grid: (gridv - direct).abs() / direct.abs(),
                samples,
                expected_to_match: constants.mode == KernelConstants::Physical,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::VelocityScheme;

    fn nu_closed_form(s: f64) -> f64 {
        // E|s·e − Z| for Z ~ N(0, I), times 2π.
        let erf = libm::erf(s / std::f64::consts::SQRT_2);
        TWO_PI * ((2.0 / std::f64::consts::PI).sqrt() * (-0.5 * s * s).exp() + (s + 1.0 / s) * erf)
    }

    #[test]
    fn nu_matches_closed_form() {
        assert!((nu_radial(0.0) - 4.0 * TWO_PI.sqrt()).abs() < 1e-11);
        for s in [0.3, 1.0, 2.0, 4.0, 6.0, 9.0] {
            assert!((nu_radial(s) - nu_closed_form(s)).abs() < 1e-10 * nu_closed_form(s));
        }
    }

    #[test]
    fn physical_constants_annihilate_sqrt_m_at_origin() {
        let c = GradConstants::physical();
        let sqm = |v: &[f64; 3]| sqrt_maxwellian(v);
        let k = grad_row_quadrature(&[0.0; 3], &c, sqm);
        let nu = nu_radial(0.0) * sqrt_maxwellian(&[0.0; 3]);
        assert!((k - nu).abs() < 1e-7 * nu, "{k} vs {nu}");
    }

    #[test]
    fn kernel_is_exactly_symmetric() {
        let c = GradConstants::physical();
        let a = [0.3, -1.2, 2.0];
        let b = [-0.7, 0.4, 1.1];
        assert_eq!(grad_kernel(&a, &b, &c).unwrap(), grad_kernel(&b, &a, &c).unwrap());
        assert!(grad_kernel(&a, &a, &c).is_err());
    }

    #[test]
    fn reduced_operator_agrees_with_full_on_invariant_fields() {
        let g = VelocityGrid::<f64>::new(4.0, 6, VelocityScheme::Uniform, 0.02).unwrap();
        let full = CollisionOperator::assemble(&g, GradConstants::physical());
        let red = ReducedOperator::assemble(&g, GradConstants::physical(), false);
        let f = g.sample(|v| (-(v[0] - 0.3).powi(2) - v[1] * v[1] - v[2] * v[2]).exp());
        let lf = full.apply_l(&f).unwrap();
        let fr = red.orbits.reduce(&g, &f);
        let lr = red.apply_l(&fr);
        for (r, &i) in red.orbits.rep.iter().enumerate() {
            assert!((lf[i] - lr[r]).abs() < 1e-10 * (1.0 + lf[i].abs()));
        }
    }

    #[test]
    fn conservative_operator_kills_invariants() {
        let g = VelocityGrid::<f64>::new(5.0, 8, VelocityScheme::Uniform, 0.02).unwrap();
        let red = ReducedOperator::assemble(&g, GradConstants::physical(), true);
        for k in 0..3 {
            let e: Vec<f64> = red.invariants.column(k).iter().copied().collect();
            let le = red.apply_l(&e);
            assert!(le.iter().all(|x| x.abs() < 1e-11));
        }
    }

    #[test]
    fn cache_roundtrip() {
        let g = VelocityGrid::<f64>::new(4.0, 6, VelocityScheme::Uniform, 0.02).unwrap();
        let dir = std::env::temp_dir().join(format!("kl-cache-{}", std::process::id()));
        let a = ReducedOperator::assemble_cached(&dir, "abc123", &g, GradConstants::physical(), true)
            .unwrap();
        let b = ReducedOperator::assemble_cached(&dir, "abc123", &g, GradConstants::physical(), true)
            .unwrap();
        assert_eq!(a.k_raw, b.k_raw);
        assert!(ReducedOperator::load(
            &dir.join("operator-abc123.bin"),
            "other",
            &g,
            GradConstants::physical(),
            true
        )
        .unwrap()
        .is_none());
        std::fs::remove_dir_all(dir).ok();
    }
}
