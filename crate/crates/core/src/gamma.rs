//! Hard-sphere bilinear collision form
//! `Γ(f,g) = M^{−1/2} Q(√M f, √M g)` on the D4 orbit space.
//!
//! With `M(ξ)M(ξ_*) = M(ξ′)M(ξ′_*)`,
//!
//! ```text
//! Γ(f,g)(ξ) = ∫∫ |(ξ−ξ_*)·ω| √M(ξ_*) [f(ξ′)g(ξ′_*) − f(ξ)g(ξ_*)] dω dξ_*.
//! ```
//!
//! The post-collision values are read off the grid by trilinear
//! interpolation, so every row becomes a quadratic form in the reduced
//! unknowns. The tables are symmetrized in `(f, g)` and the output is
//! projected off the discrete collision invariants.

use crate::collision::ReducedOperator;
use crate::config::GammaMethod;
use crate::error::{LabError, Result};
use crate::grids::{sqrt_maxwellian, VelocityGrid};
use crate::scalar::{norm2, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const PI: f64 = std::f64::consts::PI;

/// Assembly method actually used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GammaAssembly {
    /// Grid nodes for `ξ_*` and an 8-direction angular rule.
    Product,
    /// Gaussian importance sampling of `(ξ_*, ω)` with a fixed seed.
    MonteCarlo {
        /// Samples per row.
        samples: usize,
        /// Seed.
        seed: u64,
    },
}

/// Precomputed sparse interaction table of `Γ`.
#[derive(Clone, Debug)]
pub struct GammaEvaluator {
    n: usize,
    row_ptr: Vec<usize>,
    a: Vec<u16>,
    b: Vec<u16>,
    val: Vec<f64>,
    /// Loss matrix `ℓ_{ib}` (row-major), `(loss g)_i = Σ_b ℓ_{ib} g_b`.
    loss: Vec<f64>,
    invariants: Vec<Vec<f64>>,
    q: Vec<f64>,
    /// Method tag.
    pub method: GammaAssembly,
    ctx: RowContext,
}

/// Trilinear stencil of `p` on the tensor grid applied to `f/√M` and scaled
/// back by `√M(p)`: up to 8 `(full index, weight)` pairs; `None` outside the
/// node hull (the fields vanish there to truncation accuracy). Interpolating
/// the ratio keeps `√M` times any affine function exact, so the equilibrium
/// gain and loss cancel on the grid.
fn stencil(axis: &[f64], n: usize, sqm: &[f64], p: &[f64; 3]) -> Option<[(usize, f64); 8]> {
    let mut lo = [0usize; 3];
    let mut t = [0.0; 3];
    for d in 0..3 {
        let x = p[d];
        if x < axis[0] || x > axis[n - 1] {
            return None;
        }
        let k = axis.partition_point(|&a| a <= x).clamp(1, n - 1) - 1;
        lo[d] = k;
        t[d] = (x - axis[k]) / (axis[k + 1] - axis[k]);
    }
    let mut out = [(0usize, 0.0); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let bits = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for d in 0..3 {
            idx[d] = lo[d] + bits[d];
            w *= if bits[d] == 1 { t[d] } else { 1.0 - t[d] };
        }
        *slot = ((idx[0] * n + idx[1]) * n + idx[2], w);
    }
    let sp = sqrt_maxwellian(p);
    for slot in out.iter_mut() {
        slot.1 *= sp / sqm[slot.0];
    }
    Some(out)
}

/// Two unit vectors completing `e` to an orthonormal frame.
fn frame(e: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if e[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let d = helper[0] * e[0] + helper[1] * e[1] + helper[2] * e[2];
    let mut a = [helper[0] - d * e[0], helper[1] - d * e[1], helper[2] - d * e[2]];
    let na = norm2(&a).sqrt();
    a.iter_mut().for_each(|x| *x /= na);
    let b = [
        e[1] * a[2] - e[2] * a[1],
        e[2] * a[0] - e[0] * a[2],
        e[0] * a[1] - e[1] * a[0],
    ];
    (a, b)
}

/// Post-collision pair for relative velocity `V = ξ − ξ_*` and direction `ω`.
fn collide(v: &[f64; 3], vs: &[f64; 3], omega: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let c = (v[0] - vs[0]) * omega[0] + (v[1] - vs[1]) * omega[1] + (v[2] - vs[2]) * omega[2];
    (
        [v[0] - c * omega[0], v[1] - c * omega[1], v[2] - c * omega[2]],
        [vs[0] + c * omega[0], vs[1] + c * omega[1], vs[2] + c * omega[2]],
    )
}

struct RowAccumulator {
    n: usize,
    gain: Vec<f64>,
    loss: Vec<f64>,
}

impl RowAccumulator {
    fn new(n: usize) -> Self {
        Self {
            n,
            gain: vec![0.0; n * n],
            loss: vec![0.0; n],
        }
    }

    fn add_gain(&mut self, w: f64, s1: &[(usize, f64); 8], s2: &[(usize, f64); 8], red: &[usize]) {
        for &(i1, w1) in s1 {
            if w1 == 0.0 {
                continue;
            }
            let a = red[i1];
            for &(i2, w2) in s2 {
                if w2 != 0.0 {
                    self.gain[a * self.n + red[i2]] += w * w1 * w2;
                }
            }
        }
    }

    /// Symmetrized upper triangle `(a ≤ b)` with the weight of
    /// `(f_a g_b + f_b g_a)/2`.
    fn compress(self) -> (Vec<u16>, Vec<u16>, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let (mut ia, mut ib, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for a in 0..n {
            for b in a..n {
                let s = if a == b {
                    self.gain[a * n + a]
                } else {
                    self.gain[a * n + b] + self.gain[b * n + a]
                };
                if s != 0.0 {
                    ia.push(a as u16);
                    ib.push(b as u16);
                    v.push(s);
                }
            }
        }
        (ia, ib, v, self.loss)
    }
}

/// Grid data needed to build one row of the table for any velocity.
#[derive(Clone, Debug)]
struct RowContext {
    nodes: Vec<[f64; 3]>,
    q: Vec<f64>,
    axis: Vec<f64>,
    na: usize,
    red: Vec<usize>,
    sqm: Vec<f64>,
    n: usize,
    method: GammaAssembly,
}

impl RowContext {
    /// Gain and loss tables of `Γ(·,·)(v)`; `key` seeds the random parts.
    fn row(&self, v: &[f64; 3], key: u64) -> RowAccumulator {
        let v = *v;
        let red = &self.red;
        let mut acc = RowAccumulator::new(self.n);
        match self.method {
            GammaAssembly::Product => {
                // 8 directions: μ = cos∠(ω, V) at the midpoints of two
                // equal-mass strata of the density 2μ on [0, 1], four
                // equispaced azimuths with a seeded random phase per
                // pair. Each carries 2π|V|/8, so the gain weights sum
                // to the exact loss rate 2π|V|.
                let (nmu, nphi) = (2usize, 4usize);
                let mut rng = ChaCha8Rng::seed_from_u64(0x5EED ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let w_dir = 2.0 * PI / (nmu * nphi) as f64;
                for (j, vs) in self.nodes.iter().enumerate() {
                    let rel = [v[0] - vs[0], v[1] - vs[1], v[2] - vs[2]];
                    let speed = norm2(&rel).sqrt();
                    if speed == 0.0 {
                        continue;
                    }
                    let e = [rel[0] / speed, rel[1] / speed, rel[2] / speed];
                    let (e1, e2) = frame(&e);
                    let base = self.q[j] * self.sqm[j];
                    acc.loss[red[j]] += base * 2.0 * PI * speed;
                    let phase = 2.0 * PI * rng.random::<f64>();
                    for km in 0..nmu {
                        let m = ((km as f64 + 0.5) / nmu as f64).sqrt();
                        let s = (1.0 - m * m).sqrt();
                        for k in 0..nphi {
                            let phi = phase + 2.0 * PI * k as f64 / nphi as f64;
                            let omega = [
                                m * e[0] + s * (phi.cos() * e1[0] + phi.sin() * e2[0]),
                                m * e[1] + s * (phi.cos() * e1[1] + phi.sin() * e2[1]),
                                m * e[2] + s * (phi.cos() * e1[2] + phi.sin() * e2[2]),
                            ];
                            let (vp, vsp) = collide(&v, vs, &omega);
                            if let (Some(s1), Some(s2)) = (stencil(&self.axis, self.na, &self.sqm, &vp), stencil(&self.axis, self.na, &self.sqm, &vsp)) {
                                acc.add_gain(base * w_dir * speed, &s1, &s2, red);
                            }
                        }
                    }
                }
            }
            GammaAssembly::MonteCarlo { samples, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                // ξ_* ~ N(0, 2I) so √M(ξ_*)/p(ξ_*) is the constant c_p.
                let cp = (4.0 * PI).powf(1.5) / (2.0 * PI).powf(0.75);
                let scale = cp / samples as f64;
                for _ in 0..samples {
                    let vs = [gauss(&mut rng) * 2f64.sqrt(), gauss(&mut rng) * 2f64.sqrt(), gauss(&mut rng) * 2f64.sqrt()];
                    let omega = unit_vector(&mut rng);
                    let rel = [v[0] - vs[0], v[1] - vs[1], v[2] - vs[2]];
                    let speed = norm2(&rel).sqrt();
                    if let Some(s0) = stencil(&self.axis, self.na, &self.sqm, &vs) {
                        for &(j, w) in &s0 {
                            acc.loss[red[j]] += scale * 2.0 * PI * speed * w;
                        }
                    }
                    let cosang = (rel[0] * omega[0] + rel[1] * omega[1] + rel[2] * omega[2]).abs();
                    let (vp, vsp) = collide(&v, &vs, &omega);
                    if let (Some(s1), Some(s2)) = (stencil(&self.axis, self.na, &self.sqm, &vp), stencil(&self.axis, self.na, &self.sqm, &vsp)) {
                        acc.add_gain(scale * 4.0 * PI * cosang, &s1, &s2, red);
                    }
                }
            }
        }
        acc
    }
}

impl GammaEvaluator {
    /// Assembles the table on the orbit space of `op`.
    pub fn assemble<T: Real>(
        grid: &VelocityGrid<T>,
        op: &ReducedOperator,
        method: GammaMethod,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = op.len();
        if n > u16::MAX as usize {
            return Err(LabError::Config(format!("{n} reduced unknowns exceed the Γ table index range")));
        }
        let method = match method {
            GammaMethod::Product => GammaAssembly::Product,
            GammaMethod::MonteCarlo => GammaAssembly::MonteCarlo { samples, seed },
            GammaMethod::Auto if grid.n_axis <= 10 => GammaAssembly::Product,
            GammaMethod::Auto => GammaAssembly::MonteCarlo { samples, seed },
        };
        if let GammaAssembly::MonteCarlo { samples, .. } = method {
            if samples == 0 {
                return Err(LabError::Config("gamma.samples must be positive".into()));
            }
        }
        let nodes: Vec<[f64; 3]> = grid
            .nodes
            .iter()
            .map(|v| [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()])
            .collect();
        let q: Vec<f64> = grid.weights.iter().map(|w| w.to_f64_lossy()).collect();
        let axis: Vec<f64> = grid.axis.iter().map(|a| a.to_f64_lossy()).collect();
        let na = grid.n_axis;
        let sqm: Vec<f64> = nodes.iter().map(sqrt_maxwellian).collect();
        let ctx = RowContext {
            nodes,
            q,
            axis,
            na,
            red: op.orbits.full_to_red.clone(),
            sqm,
            n,
            method,
        };
        let rows: Vec<_> = (0..n)
            .into_par_iter()
            .map(|r| ctx.row(&ctx.nodes[op.orbits.rep[r]], r as u64).compress())
            .collect();
        let mut row_ptr = vec![0];
        let (mut a, mut b, mut val, mut loss) = (Vec::new(), Vec::new(), Vec::new(), Vec::with_capacity(n * n));
        for (ra, rb, rv, rl) in rows {
            a.extend(ra);
            b.extend(rb);
            val.extend(rv);
            row_ptr.push(val.len());
            loss.extend(rl);
        }
        let invariants = (0..3)
            .map(|k| op.invariants.column(k).iter().copied().collect())
            .collect();
        Ok(Self {
            n,
            row_ptr,
            a,
            b,
            val,
            loss,
            invariants,
            q: op.q.clone(),
            method,
            ctx,
        })
    }

    /// Number of reduced unknowns.
    pub fn len(&self) -> usize {
        self.n
    }

    /// Whether the table is empty.
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Stored interaction entries.
    pub fn nnz(&self) -> usize {
        self.val.len()
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

    /// `Γ(f,g)` before the invariant projection. Bitwise symmetric in
    /// `(f, g)`.
    pub fn apply_raw(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.check(f)?;
        self.check(g)?;
        let n = self.n;
        Ok((0..n)
            .map(|i| {
                let mut gain = 0.0;
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    let (a, b) = (self.a[k] as usize, self.b[k] as usize);
                    gain += self.val[k] * (f[a] * g[b] + f[b] * g[a]);
                }
                let row = &self.loss[i * n..(i + 1) * n];
                let lf: f64 = row.iter().zip(f).map(|(l, x)| l * x).sum();
                let lg: f64 = row.iter().zip(g).map(|(l, x)| l * x).sum();
                0.5 * gain - 0.5 * (f[i] * lg + g[i] * lf)
            })
            .collect())
    }

    /// `Γ(f,g)` projected off the discrete collision invariants.
    pub fn apply(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.apply_raw(f, g)?;
        self.project(&mut out);
        Ok(out)
    }

    /// `Γ(f,f)`, projected.
    pub fn quadratic(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.apply(f, f)
    }

    fn project(&self, v: &mut [f64]) {
        for e in &self.invariants {
            let c: f64 = v.iter().zip(e).zip(&self.q).map(|((x, y), w)| w * x * y).sum();
            v.iter_mut().zip(e).for_each(|(x, y)| *x -= c * y);
        }
    }

    /// Table row of `Γ(·,·)(v)` at an arbitrary velocity `v`, folded onto the
    /// orbit space. `key` seeds the random parts; the key of orbit `r` is
    /// `r`, which reproduces the stored row when `v` is its representative.
    pub fn probe_row(&self, v: &[f64; 3], key: u64) -> GammaRow {
        let (a, b, val, loss) = self.ctx.row(v, key).compress();
        GammaRow { a, b, val, loss }
    }

    /// Raw invariant moments `⟨e_k Γ_raw(f,g)⟩` (conservation defect of the
    /// discretization before projection).
    pub fn conservation_defect(&self, f: &[f64], g: &[f64]) -> Result<[f64; 3]> {
        let raw = self.apply_raw(f, g)?;
        let mut out = [0.0; 3];
        for (k, e) in self.invariants.iter().enumerate() {
            out[k] = raw.iter().zip(e).zip(&self.q).map(|((x, y), w)| w * x * y).sum();
        }
        Ok(out)
    }
}

/// One row of the `Γ` table at an off-grid velocity.
#[derive(Clone, Debug)]
pub struct GammaRow {
    a: Vec<u16>,
    b: Vec<u16>,
    val: Vec<f64>,
    loss: Vec<f64>,
}

impl GammaRow {
    /// `(gain, loss)` with `Γ_raw(f,f)(v) = gain − f(v)·loss` for a reduced
    /// field `f`.
    pub fn split(&self, f: &[f64]) -> (f64, f64) {
        let gain = self
            .a
            .iter()
            .zip(&self.b)
            .zip(&self.val)
            .map(|((&a, &b), v)| v * f[a as usize] * f[b as usize])
            .sum();
        let loss = self.loss.iter().zip(f).map(|(l, x)| l * x).sum();
        (gain, loss)
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

/// Empirical constant of `‖wΓ(f,g)/(1+|ξ|)‖∞ ≤ C_Γ‖wf‖∞‖wg‖∞`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GammaBound {
    /// Max ratio over the sample.
    pub constant: f64,
    /// Sample count.
    pub samples: usize,
    /// Per-sample ratios.
    pub ratios: Vec<f64>,
}

/// Fits `C_Γ` over random pairs with `|f|, |g| ≤ w^{−1}`.
pub fn fit_gamma_bound(
    gamma: &GammaEvaluator,
    op: &ReducedOperator,
    theta: f64,
    samples: usize,
    seed: u64,
) -> Result<GammaBound> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = op.nodes.iter().map(|v| (theta * norm2(v)).exp()).collect();
    let speed: Vec<f64> = op.nodes.iter().map(|v| 1.0 + norm2(v).sqrt()).collect();
    let mut ratios = Vec::with_capacity(samples);
    for _ in 0..samples {
        let f: Vec<f64> = w.iter().map(|x| rng.random_range(-1.0..1.0) / x).collect();
        let g: Vec<f64> = w.iter().map(|x| rng.random_range(-1.0..1.0) / x).collect();
        let out = gamma.apply(&f, &g)?;
        let num = (0..out.len()).map(|i| w[i] * out[i].abs() / speed[i]).fold(0.0, f64::max);
        let nf = (0..f.len()).map(|i| w[i] * f[i].abs()).fold(0.0, f64::max);
        let ng = (0..g.len()).map(|i| w[i] * g[i].abs()).fold(0.0, f64::max);
        ratios.push(num / (nf * ng));
    }
    let constant = ratios.iter().copied().fold(0.0, f64::max);
    Ok(GammaBound {
        constant,
        samples,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::GradConstants;
    use crate::grids::VelocityScheme;

    fn setup(method: GammaMethod) -> (ReducedOperator, GammaEvaluator) {
        let g = VelocityGrid::<f64>::new(6.0, 8, VelocityScheme::Uniform, 0.02).unwrap();
        let op = ReducedOperator::assemble(&g, GradConstants::physical(), true);
        let ev = GammaEvaluator::assemble(&g, &op, method, 256, 5).unwrap();
        (op, ev)
    }

    #[test]
    fn bilinear_and_symmetric() {
        let (op, ev) = setup(GammaMethod::Product);
        let f: Vec<f64> = op.nodes.iter().map(|v| (-norm2(v) / 3.0).exp() * (1.0 + v[0])).collect();
        let g: Vec<f64> = op.nodes.iter().map(|v| (-norm2(v) / 4.0).exp() * (v[0] * v[0] - 1.0)).collect();
        assert_eq!(ev.apply(&f, &g).unwrap(), ev.apply(&g, &f).unwrap());
        let zero = vec![0.0; op.len()];
        assert!(ev.apply(&f, &zero).unwrap().iter().all(|x| *x == 0.0));
        let sum: Vec<f64> = f.iter().zip(&g).map(|(a, b)| a + b).collect();
        let lhs = ev.apply(&sum, &g).unwrap();
        let r1 = ev.apply(&f, &g).unwrap();
        let r2 = ev.apply(&g, &g).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs[i] - r1[i] - r2[i]).abs() < 1e-12);
        }
        let proj = ev.apply(&f, &g).unwrap();
        let scale = op.inner(&proj, &proj).sqrt();
        for k in 0..3 {
            let e: Vec<f64> = op.invariants.column(k).iter().copied().collect();
            assert!(op.inner(&proj, &e).abs() < 1e-13 * scale);
        }
    }

    #[test]
    fn maxwellian_perturbation_is_nearly_collision_free() {
        // √M is an equilibrium direction: Γ(√M, √M) = M^{-1/2}Q(M, M) = 0.
        let (op, ev) = setup(GammaMethod::Product);
        let s: Vec<f64> = op.nodes.iter().map(sqrt_maxwellian).collect();
        let out = ev.apply_raw(&s, &s).unwrap();
        let loss: Vec<f64> = (0..op.len())
            .map(|i| s[i] * ev.loss[i * op.len()..(i + 1) * op.len()].iter().zip(&s).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let rel = (op.inner(&out, &out) / op.inner(&loss, &loss)).sqrt();
        assert!(rel < 0.3, "{rel}");
    }

    #[test]
    fn monte_carlo_variant_is_symmetric() {
        let (op, ev) = setup(GammaMethod::MonteCarlo);
        let f: Vec<f64> = op.nodes.iter().map(|v| (-norm2(v) / 3.0).exp()).collect();
        let g: Vec<f64> = op.nodes.iter().map(|v| v[0] * (-norm2(v) / 3.0).exp()).collect();
        assert_eq!(ev.apply(&f, &g).unwrap(), ev.apply(&g, &f).unwrap());
        assert!(matches!(ev.method, GammaAssembly::MonteCarlo { samples: 256, seed: 5 }));
    }

    #[test]
    fn probe_row_reproduces_stored_rows() {
        for method in [GammaMethod::Product, GammaMethod::MonteCarlo] {
            let (op, ev) = setup(method);
            let f: Vec<f64> = op.nodes.iter().map(|v| (-norm2(v) / 3.0).exp() * (1.0 + v[0])).collect();
            let raw = ev.apply_raw(&f, &f).unwrap();
            for r in [0, 7, op.len() - 1] {
                let (gain, loss) = ev.probe_row(&op.nodes[r], r as u64).split(&f);
                let v = gain - f[r] * loss;
                assert!((v - raw[r]).abs() <= 1e-12 * raw[r].abs().max(1e-3), "{v} {}", raw[r]);
            }
        }
    }
}
