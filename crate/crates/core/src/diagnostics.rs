//! Derivative fields and the weighted regularity norms of a computed layer.
//!
//! Every integral here takes the velocity nodes, their quadrature masses
//! and a per-node weight explicitly, so the same code runs on the reduced
//! grid, on a grid augmented by grazing probes, and on synthetic data.

use crate::collision::ReducedOperator;
use crate::error::{invalid, LabError, Result};
use crate::field::Field;
use crate::gamma::GammaEvaluator;
use crate::grids::VelocityGrid;
use crate::kinetic_weight::WeightSpec;
use crate::probe::{ProbeContext, ProbeOptions, ProbeSolution};
use crate::quadrature::gauss_legendre;
use crate::symmetry::OrbitSpace;
use crate::transport::{fd_weights, PenalizedSystem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Relative size of the masked band around the grazing set, in units of the
/// `ξ₁` spacing.
pub const MASK_FACTOR: f64 = 0.05;

/// Minimum share of the quadrature mass a weighted sup must see.
pub const MIN_COVERAGE: f64 = 0.999;

/// How `∂ₓf` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMethod {
    /// Second-order differences: one-sided at the ends, central inside.
    FiniteDifference,
    /// `∂ₓf` read off the equation, masked near grazing.
    EquationBased,
}

/// `∂ₓf` on a station grid; masked entries are `None`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DerivativeField {
    /// Method that produced the values.
    pub method: DerivativeMethod,
    /// Stations.
    pub x: Vec<f64>,
    /// Velocity nodes per station.
    pub nv: usize,
    /// Station-major values.
    pub values: Vec<Option<f64>>,
    /// Half-width of the masked band in `ξ₁+u` (zero when nothing is masked).
    pub threshold: f64,
}

impl DerivativeField {
    /// Wraps a dense field.
    pub fn dense(method: DerivativeMethod, x: Vec<f64>, field: &Field) -> Result<Self> {
        if field.nx != x.len() {
            return Err(invalid("x", format!("{} stations for {} rows", x.len(), field.nx)));
        }
        Ok(Self {
            method,
            x,
            nv: field.nv,
            values: field.data.iter().map(|&v| Some(v)).collect(),
            threshold: 0.0,
        })
    }

    /// Values at station `j`.
    pub fn row(&self, j: usize) -> &[Option<f64>] {
        &self.values[j * self.nv..(j + 1) * self.nv]
    }

    /// Number of masked entries.
    pub fn masked(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// `sup |∂ₓf|` over the present entries.
    pub fn sup(&self) -> f64 {
        self.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `sup |∂ₓf|` over the stations in `[lo, hi]` and the nodes selected by
    /// `keep`.
    pub fn sup_where(&self, lo: f64, hi: f64, keep: impl Fn(usize) -> bool) -> f64 {
        let mut m = 0.0f64;
        for (j, &xj) in self.x.iter().enumerate() {
            if xj < lo || xj > hi {
                continue;
            }
            for (i, v) in self.row(j).iter().enumerate() {
                if let (true, Some(v)) = (keep(i), v) {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }
}

/// Derivative weights at `at` of the quadratic through `t`.
fn lagrange_derivative(t: [f64; 3], at: f64) -> [f64; 3] {
    let mut w = [0.0; 3];
    for i in 0..3 {
        let mut denom = 1.0;
        for k in 0..3 {
            if k != i {
                denom *= t[i] - t[k];
            }
        }
        let mut num = 0.0;
        for m in 0..3 {
            if m == i {
                continue;
            }
            let mut p = 1.0;
            for k in 0..3 {
                if k != i && k != m {
                    p *= at - t[k];
                }
            }
            num += p;
        }
        w[i] = num / denom;
    }
    w
}

/// Second-order finite differences of `f` on the stations `x`.
pub fn fd_derivative(x: &[f64], f: &Field) -> Result<DerivativeField> {
    let n = x.len();
    if n < 3 || f.nx != n {
        return Err(invalid("x", format!("need ≥ 3 stations matching the field, got {n} and {}", f.nx)));
    }
    let mut out = Field::zeros(n, f.nv);
    for j in 0..n {
        let (idx, w) = if j == 0 {
            ([0, 1, 2], lagrange_derivative([x[0], x[1], x[2]], x[0]))
        } else if j == n - 1 {
            ([n - 3, n - 2, n - 1], lagrange_derivative([x[n - 3], x[n - 2], x[n - 1]], x[n - 1]))
        } else {
            ([j - 1, j, j + 1], fd_weights(x, j))
        };
        for i in 0..f.nv {
            out.row_mut(j)[i] = w[0] * f.row(idx[0])[i] + w[1] * f.row(idx[1])[i] + w[2] * f.row(idx[2])[i];
        }
    }
    DerivativeField::dense(DerivativeMethod::FiniteDifference, x.to_vec(), &out)
}

/// `∂ₓf = (Γ(f,f) − 𝓛f − e^{−γx}(αX₊m₊ − βm_ψφ_u))/(ξ₁+u)`, the penalized
/// equation solved for the derivative; entries with `|ξ₁+u| ≤ 0.05·h_ξ₁`
/// are masked.
pub fn equation_derivative(
    sys: &PenalizedSystem,
    op: &ReducedOperator,
    gamma: &GammaEvaluator,
    g: &Field,
    h: &[f64],
    xi1_spacing: f64,
) -> Result<DerivativeField> {
    let f = sys.reconstruct_f(g, h);
    let pen = &sys.pen;
    let proj = &pen.proj;
    let threshold = MASK_FACTOR * xi1_spacing;
    let rows: Vec<Vec<Option<f64>>> = (0..sys.x.len())
        .into_par_iter()
        .map(|j| -> Result<Vec<Option<f64>>> {
            let lf = op.apply_l(f.row(j));
            let q = gamma.quadratic(f.row(j))?;
            let gj = g.row(j);
            let m_plus: f64 = proj.flux_xp.iter().zip(gj).map(|(a, b)| a * b).sum();
            let m_psi: f64 = proj.flux_psi.iter().zip(gj).map(|(a, b)| a * b).sum();
            let e = (-pen.gamma * sys.x[j]).exp();
            Ok((0..pen.len())
                .map(|i| {
                    let d = pen.d[i];
                    if d.abs() <= threshold {
                        return None;
                    }
                    let pent = e * (pen.alpha * proj.x_plus[i] * m_plus - pen.beta * m_psi * proj.phi[i]);
                    Some((q[i] - lf[i] - pent) / d)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(DerivativeField {
        method: DerivativeMethod::EquationBased,
        x: sys.x.clone(),
        nv: pen.len(),
        values: rows.into_iter().flatten().collect(),
        threshold,
    })
}

/// Largest per-station relative gap `max_i|a−b| / max_i|b|` over the
/// stations in `[lo, hi]` whose reference sup exceeds `floor` times the
/// global one.
pub fn derivative_gap(a: &DerivativeField, b: &DerivativeField, lo: f64, hi: f64, floor: f64) -> Result<f64> {
    if a.x.len() != b.x.len() || a.nv != b.nv {
        return Err(invalid("derivative", "fields live on different grids"));
    }
    let global = b.sup();
    let mut worst = 0.0f64;
    for j in 0..a.x.len() {
        if a.x[j] < lo || a.x[j] > hi {
            continue;
        }
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for (p, q) in a.row(j).iter().zip(b.row(j)) {
            if let (Some(p), Some(q)) = (p, q) {
                diff = diff.max((p - q).abs());
                scale = scale.max(q.abs());
            }
        }
        if scale > floor * global && scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

/// Least-squares fit `ln y ≈ intercept + slope·x`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecayFit {
    /// Fitted slope.
    pub slope: f64,
    /// Fitted intercept.
    pub intercept: f64,
    /// Points used.
    pub points: usize,
    /// Window start.
    pub lo: f64,
    /// Window end.
    pub hi: f64,
}

fn linear_fit(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in t.iter().zip(y) {
        sxy += (a - mt) * (b - my);
        sxx += (a - mt) * (a - mt);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mt)
}

/// Fits the exponential decay of `profile` over `[lo, hi]`. Points below
/// `floor` times the window maximum are round-off and are left out.
pub fn fit_decay(x: &[f64], profile: &[f64], lo: f64, hi: f64, floor: f64) -> Result<DecayFit> {
    if x.len() != profile.len() {
        return Err(invalid("profile", "length differs from the stations"));
    }
    let inside: Vec<usize> = (0..x.len()).filter(|&j| x[j] >= lo && x[j] <= hi).collect();
    let top = inside.iter().fold(0.0f64, |m, &j| m.max(profile[j]));
    let keep: Vec<usize> = inside.into_iter().filter(|&j| profile[j] > floor * top && profile[j] > 0.0).collect();
    if keep.len() < 3 {
        return Err(invalid("profile", format!("only {} usable points in [{lo}, {hi}]", keep.len())));
    }
    let t: Vec<f64> = keep.iter().map(|&j| x[j]).collect();
    let y: Vec<f64> = keep.iter().map(|&j| profile[j].ln()).collect();
    let (slope, intercept) = linear_fit(&t, &y);
    Ok(DecayFit {
        slope,
        intercept,
        points: keep.len(),
        lo,
        hi,
    })
}

/// `x ↦ sup_ξ w_θ̃ α|∂ₓf|` and its summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct C1Profile {
    /// Stations.
    pub x: Vec<f64>,
    /// Profile values.
    pub profile: Vec<f64>,
    /// Global sup.
    pub sup: f64,
    /// Smallest per-station share of the quadrature mass with a value.
    pub coverage: f64,
    /// Decay fit over the requested window, when it has enough points.
    pub fit: Option<DecayFit>,
}

/// Weighted-C¹ profile. `weight[i]` is `w_θ̃(ξ_i)`; `(lo, hi)` is the fit
/// window and `floor` the relative noise floor of the fit.
pub fn weighted_c1_profile(
    df: &DerivativeField,
    nodes: &[[f64; 3]],
    q: &[f64],
    weight: &[f64],
    spec: &WeightSpec<f64>,
    window: (f64, f64),
    floor: f64,
) -> Result<C1Profile> {
    if nodes.len() != df.nv || q.len() != df.nv || weight.len() != df.nv {
        return Err(invalid("nodes", "node data does not match the derivative field"));
    }
    let total: f64 = q.iter().sum();
    let mut coverage = 1.0f64;
    let mut profile = Vec::with_capacity(df.x.len());
    for (j, &xj) in df.x.iter().enumerate() {
        let (mut seen, mut m) = (0.0, 0.0f64);
        for (i, v) in df.row(j).iter().enumerate() {
            if let Some(v) = v {
                seen += q[i];
                m = m.max(weight[i] * spec.alpha(xj, nodes[i][0]) * v.abs());
            }
        }
        coverage = coverage.min(seen / total);
        profile.push(m);
    }
    if coverage < MIN_COVERAGE {
        return Err(invalid(
            "coverage",
            format!("masked entries leave {coverage:.6} of the quadrature mass (< {MIN_COVERAGE})"),
        ));
    }
    let sup = profile.iter().fold(0.0f64, |m, v| m.max(*v));
    let fit = fit_decay(&df.x, &profile, window.0, window.1, floor).ok();
    Ok(C1Profile {
        x: df.x.clone(),
        profile,
        sup,
        coverage,
        fit,
    })
}

/// `S_j = Σ_i q_i |weight_i e^{κx_j} ∂ₓf|^p` over the present entries.
fn station_integrand(df: &DerivativeField, q: &[f64], weight: &[f64], p: f64, kappa: f64) -> Vec<f64> {
    df.x.iter()
        .enumerate()
        .map(|(j, &xj)| {
            let e = (kappa * xj).exp();
            df.row(j)
                .iter()
                .zip(q)
                .zip(weight)
                .filter_map(|((v, qi), wi)| v.map(|v| qi * (wi * e * v).abs().powf(p)))
                .sum()
        })
        .collect()
}

/// Trapezoid rule of station values over `[from, x_last]`, with linear
/// interpolation inside the cell holding `from`.
fn trapezoid_from(x: &[f64], s: &[f64], from: f64) -> f64 {
    let mut total = 0.0;
    for j in 0..x.len() - 1 {
        let (a, b) = (x[j], x[j + 1]);
        if b <= from {
            continue;
        }
        if a >= from {
            total += 0.5 * (b - a) * (s[j] + s[j + 1]);
        } else {
            let t = (from - a) / (b - a);
            let sf = s[j] + t * (s[j + 1] - s[j]);
            total += 0.5 * (b - from) * (sf + s[j + 1]);
        }
    }
    total
}

fn check_node_data(df: &DerivativeField, q: &[f64], weight: &[f64]) -> Result<()> {
    if q.len() != df.nv || weight.len() != df.nv {
        return Err(invalid("nodes", "node data does not match the derivative field"));
    }
    if df.x.len() < 2 {
        return Err(invalid("x", "need at least two stations"));
    }
    Ok(())
}

/// `‖weight·e^{γ₀x}∂ₓf‖_{L^p}` over the whole station range, `1 ≤ p < 2`.
/// `weight[i]` is `w_{θ̃/2}(ξ_i)` for the regularity norm.
pub fn w1p_norm(df: &DerivativeField, q: &[f64], weight: &[f64], p: f64, gamma0: f64) -> Result<f64> {
    if !(1.0..2.0).contains(&p) {
        return Err(invalid("p", format!("the weighted W^(1,p) bound needs 1 ≤ p < 2, got {p}")));
    }
    check_node_data(df, q, weight)?;
    let s = station_integrand(df, q, weight, p, gamma0);
    Ok(trapezoid_from(&df.x, &s, df.x[0]).powf(1.0 / p))
}

/// `∫_δ^L ∫ weight·e^{2γ₀x}|∂ₓf|² dξ dx`; `weight[i]` is `w_θ̃(ξ_i)`.
pub fn h1loc(df: &DerivativeField, q: &[f64], weight: &[f64], delta: f64, gamma0: f64) -> Result<f64> {
    check_node_data(df, q, weight)?;
    let (x0, xl) = (df.x[0], df.x[df.x.len() - 1]);
    if !(delta >= x0 && delta < xl) {
        return Err(invalid("delta", format!("must lie in [{x0}, {xl}), got {delta}")));
    }
    let root: Vec<f64> = weight.iter().map(|w| w.sqrt()).collect();
    let s = station_integrand(df, q, &root, 2.0, gamma0);
    Ok(trapezoid_from(&df.x, &s, delta))
}

/// One row of the `H¹_loc` table.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct H1Row {
    /// Cut-off.
    pub delta: f64,
    /// `H¹_loc` value.
    pub value: f64,
    /// `∫_δ¹ arctan(1/x)/x dx`.
    pub reference: f64,
}

/// Compares successive increments of the table with those of the reference:
/// returns `max |ΔH_k/ΔH_0 ÷ ΔR_k/ΔR_0 − 1|` over the increments `k ≥ 1`.
pub fn h1_growth_mismatch(rows: &[H1Row]) -> Result<f64> {
    if rows.len() < 3 {
        return Err(invalid("delta", "the growth comparison needs at least three cut-offs"));
    }
    let dh: Vec<f64> = rows.windows(2).map(|w| w[1].value - w[0].value).collect();
    let dr: Vec<f64> = rows.windows(2).map(|w| w[1].reference - w[0].reference).collect();
    if dh[0] == 0.0 || dr[0] == 0.0 {
        return Err(invalid("delta", "the first increment vanishes"));
    }
    Ok((1..dh.len()).fold(0.0f64, |m, k| m.max(((dh[k] / dh[0]) / (dr[k] / dr[0]) - 1.0).abs())))
}

/// Power-law fit `|∂ₓf| ≈ C s^p` in the grazing distance `s = ξ₁+u`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExponentFit {
    /// Fitted exponent.
    pub exponent: f64,
    /// `ln C`.
    pub log_constant: f64,
    /// Points used.
    pub points: usize,
}

/// Fits the exponent over the nodes with `s ∈ [lo, hi]`; fewer than five
/// usable nodes is an error.
pub fn grazing_exponent_fit(s: &[f64], values: &[f64], lo: f64, hi: f64) -> Result<ExponentFit> {
    if s.len() != values.len() {
        return Err(invalid("values", "length differs from the grazing distances"));
    }
    let keep: Vec<usize> = (0..s.len())
        .filter(|&k| s[k] >= lo && s[k] <= hi && values[k] != 0.0 && values[k].is_finite())
        .collect();
    if keep.len() < 5 {
        return Err(invalid(
            "grazing",
            format!("{} nodes in [{lo}, {hi}]; the fit needs at least 5", keep.len()),
        ));
    }
    let t: Vec<f64> = keep.iter().map(|&k| s[k].ln()).collect();
    let y: Vec<f64> = keep.iter().map(|&k| values[k].abs().ln()).collect();
    let (exponent, log_constant) = linear_fit(&t, &y);
    Ok(ExponentFit {
        exponent,
        log_constant,
        points: keep.len(),
    })
}

/// Panel layout of the grazing slab.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SlabOptions {
    /// Geometric panels per side.
    pub panels: usize,
    /// Panel ratio.
    pub ratio: f64,
    /// Gauss points per panel.
    pub order: usize,
}

impl Default for SlabOptions {
    fn default() -> Self {
        Self {
            panels: 10,
            ratio: 0.3,
            order: 3,
        }
    }
}

/// Probe quadrature replacing the two `ξ₁` layers around the grazing set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrazingSlab {
    /// Replaced `ξ₁` axis indices.
    pub axis: [usize; 2],
    /// Probe velocities.
    pub velocities: Vec<[f64; 3]>,
    /// Probe masses.
    pub weights: Vec<f64>,
}

/// Builds the slab `ξ₁+u ∈ [−w_{k−1}, w_k]`, which carries the same `ξ₁`
/// mass as the replaced layers, with panels graded towards `ξ₁+u = 0`.
pub fn grazing_slab(grid: &VelocityGrid<f64>, orbits: &OrbitSpace, u: f64, opts: &SlabOptions) -> Result<GrazingSlab> {
    if opts.panels == 0 || opts.order == 0 || !(opts.ratio > 0.0 && opts.ratio < 1.0) {
        return Err(invalid("slab", "need panels ≥ 1, order ≥ 1 and a ratio in (0, 1)"));
    }
    let k = grid
        .axis
        .iter()
        .position(|&a| a + u > 0.0)
        .filter(|&k| k > 0)
        .ok_or_else(|| LabError::Grazing("the grazing set is not inside the velocity box".into()))?;
    let (t, w) = gauss_legendre(opts.order);
    let mut s_nodes = Vec::new();
    for (side, extent) in [(-1.0, grid.axis_weights[k - 1]), (1.0, grid.axis_weights[k])] {
        let mut edges = vec![0.0];
        let mut e = extent * opts.ratio.powi(opts.panels as i32 - 1);
        for _ in 0..opts.panels {
            edges.push(e);
            e /= opts.ratio;
        }
        for pair in edges.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            for (ti, wi) in t.iter().zip(&w) {
                s_nodes.push((side * (0.5 * (a + b) + 0.5 * (b - a) * ti), 0.5 * (b - a) * wi));
            }
        }
    }
    let n = grid.n_axis;
    let mut velocities = Vec::new();
    let mut weights = Vec::new();
    for members in &orbits.plane_orbits {
        let (a, b) = (members[0] / n, members[0] % n);
        let mass = members.len() as f64 * grid.axis_weights[a] * grid.axis_weights[b];
        for &(s, ws) in &s_nodes {
            velocities.push([s - u, grid.axis[a], grid.axis[b]]);
            weights.push(ws * mass);
        }
    }
    Ok(GrazingSlab {
        axis: [k - 1, k],
        velocities,
        weights,
    })
}

/// A derivative field on the probe stations whose velocity set is the grid
/// minus the slab layers plus the slab probes.
#[derive(Clone, Debug)]
pub struct AugmentedField {
    /// Derivative values.
    pub df: DerivativeField,
    /// Velocities of the columns.
    pub nodes: Vec<[f64; 3]>,
    /// Quadrature masses of the columns.
    pub q: Vec<f64>,
    /// Number of probe columns (the trailing ones).
    pub probes: usize,
}

/// Interpolates `base` onto the probe stations and appends the slab probes.
pub fn augment_with_slab(
    ctx: &ProbeContext<'_>,
    op: &ReducedOperator,
    base: &DerivativeField,
    slab: &GrazingSlab,
    opts: &ProbeOptions,
) -> Result<AugmentedField> {
    let (x, loc) = ctx.stations(opts);
    let kept: Vec<usize> = (0..op.len()).filter(|&r| !slab.axis.contains(&op.orbits.axis1(r))).collect();
    let probes: Vec<ProbeSolution> = slab
        .velocities
        .par_iter()
        .enumerate()
        .map(|(k, v)| ctx.solve(v, 0x51AB_0000 + k as u64, opts))
        .collect::<Result<_>>()?;
    let nv = kept.len() + probes.len();
    let mut values = Vec::with_capacity(x.len() * nv);
    for (js, &(j, t)) in loc.iter().enumerate() {
        for &r in &kept {
            let a = base.row(j)[r];
            values.push(if t == 0.0 {
                a
            } else {
                match (a, base.row(j + 1)[r]) {
                    (Some(a), Some(b)) => Some((1.0 - t) * a + t * b),
                    _ => None,
                }
            });
        }
        for p in &probes {
            values.push(Some(p.dfdx[js]));
        }
    }
    let mut nodes: Vec<[f64; 3]> = kept.iter().map(|&r| op.nodes[r]).collect();
    nodes.extend_from_slice(&slab.velocities);
    let mut q: Vec<f64> = kept.iter().map(|&r| op.q[r]).collect();
    q.extend_from_slice(&slab.weights);
    Ok(AugmentedField {
        df: DerivativeField {
            method: DerivativeMethod::EquationBased,
            x,
            nv,
            values,
            threshold: base.threshold,
        },
        nodes,
        q,
        probes: probes.len(),
    })
}

/// `|∂ₓf|` at the station nearest `x_at` for probes at `ξ = (s−u, t₂, t₃)`.
pub fn grazing_scan(
    ctx: &ProbeContext<'_>,
    u: f64,
    s: &[f64],
    transverse: [f64; 2],
    x_at: f64,
    opts: &ProbeOptions,
) -> Result<Vec<f64>> {
    s.par_iter()
        .enumerate()
        .map(|(k, &sk)| {
            let p = ctx.solve(&[sk - u, transverse[0], transverse[1]], 0x6AE0_0000 + k as u64, opts)?;
            let j = p
                .x
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - x_at).abs().total_cmp(&(b.1 - x_at).abs()))
                .map_or(0, |(j, _)| j);
            Ok(p.dfdx[j].abs())
        })
        .collect()
}

/// Fixed probe set for the weighted-C¹ sup: `ξ = (s−u, t, 0)` with
/// `±s` log-spaced in `[10⁻⁴, 1]` and `t ∈ {0, 0.5, 1, 1.5, 2}`. It does
/// not move with the velocity grid, so refinements sample the same points.
pub fn c1_probe_fan(u: f64) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for t in [0.0, 0.5, 1.0, 1.5, 2.0] {
        for s in log_spaced(1e-4, 1.0, 9) {
            out.push([s - u, t, 0.0]);
            out.push([-s - u, t, 0.0]);
        }
    }
    out
}

/// `sup w_θ̃ α|∂ₓf|` over probe characteristics.
pub fn probe_c1_sup(
    ctx: &ProbeContext<'_>,
    velocities: &[[f64; 3]],
    spec: &WeightSpec<f64>,
    theta_tilde: f64,
    opts: &ProbeOptions,
) -> Result<f64> {
    let sups: Vec<f64> = velocities
        .par_iter()
        .enumerate()
        .map(|(k, v)| -> Result<f64> {
            let p = ctx.solve(v, 0xC1F0_0000 + k as u64, opts)?;
            let w = crate::grids::w_weight_unchecked(v, theta_tilde);
            Ok(p.x.iter().zip(&p.dfdx).fold(0.0f64, |m, (&x, df)| m.max(w * spec.alpha(x, v[0]) * df.abs())))
        })
        .collect::<Result<_>>()?;
    Ok(sups.into_iter().fold(0.0f64, f64::max))
}

/// `n` log-spaced points in `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    (0..n)
        .map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetic_weight::{alpha_integrability, log_growth_reference};

    fn spec() -> WeightSpec<f64> {
        WeightSpec::new(1.0, 0.02).unwrap()
    }

    #[test]
    fn zero_field_has_zero_profile() {
        let x: Vec<f64> = (0..20).map(|j| 0.5 * j as f64).collect();
        let df = DerivativeField::dense(DerivativeMethod::FiniteDifference, x, &Field::zeros(20, 3)).unwrap();
        let nodes = [[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0], [1.5, 1.0, 0.0]];
        let p = weighted_c1_profile(&df, &nodes, &[1.0; 3], &[1.0; 3], &spec(), (1.0, 5.0), 1e-12).unwrap();
        assert_eq!(p.sup, 0.0);
        assert!(p.profile.iter().all(|&v| v == 0.0));
        assert!(p.fit.is_none());
    }

    #[test]
    fn masked_mass_is_reported() {
        let x = vec![0.0, 1.0];
        let mut df = DerivativeField::dense(DerivativeMethod::EquationBased, x, &Field::zeros(2, 2)).unwrap();
        df.values[1] = None;
        let nodes = [[0.5, 0.0, 0.0], [-0.02, 0.0, 0.0]];
        assert!(weighted_c1_profile(&df, &nodes, &[1.0, 0.01], &[1.0; 2], &spec(), (0.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn finite_differences_are_second_order() {
        let err = |n: usize| {
            let x: Vec<f64> = (0..=n).map(|j| (j as f64 / n as f64).powf(1.5) * 3.0).collect();
            let f = Field::from_rows(x.iter().map(|t| vec![(-t).exp(), (2.0 * t).sin()]).collect()).unwrap();
            let df = fd_derivative(&x, &f).unwrap();
            x.iter().enumerate().fold(0.0f64, |m, (j, &t)| {
                let r = df.row(j);
                m.max((r[0].unwrap() + (-t).exp()).abs()).max((r[1].unwrap() - 2.0 * (2.0 * t).cos()).abs())
            })
        };
        let ratio = err(80) / err(160);
        assert!((3.5..4.6).contains(&ratio), "{ratio}");
    }

    #[test]
    fn synthetic_power_law_gives_its_exponent() {
        let s = log_spaced(0.01, 0.3, 12);
        let v: Vec<f64> = s.iter().map(|s| 3.0 / s).collect();
        let fit = grazing_exponent_fit(&s, &v, 0.01, 0.3).unwrap();
        assert!((fit.exponent + 1.0).abs() < 1e-3);
        assert!(grazing_exponent_fit(&s[..4], &v[..4], 0.01, 0.3).is_err());
    }

    #[test]
    fn p_two_is_rejected() {
        let df = DerivativeField::dense(DerivativeMethod::FiniteDifference, vec![0.0, 1.0], &Field::zeros(2, 1)).unwrap();
        assert!(w1p_norm(&df, &[1.0], &[1.0], 2.0, 0.0).is_err());
        assert!(w1p_norm(&df, &[1.0], &[1.0], 1.5, 0.0).is_ok());
    }

    /// `df = (ξ₁² + x²)^{−1/2}` on `[δ, 1] × [0, 1]`.
    fn inverse_alpha(delta: f64) -> (DerivativeField, Vec<f64>) {
        let mut t = Vec::new();
        let mut w = Vec::new();
        let (gt, gw) = gauss_legendre(8);
        let edges = log_spaced(1e-6, 1.0, 60);
        let mut prev = 0.0;
        for e in edges {
            for (a, b) in gt.iter().zip(&gw) {
                t.push(prev + 0.5 * (e - prev) * (a + 1.0));
                w.push(0.5 * (e - prev) * b);
            }
            prev = e;
        }
        let nx = 4000;
        let x: Vec<f64> = (0..=nx).map(|j| delta * (1.0 / delta).powf(j as f64 / nx as f64)).collect();
        let rows = x.iter().map(|xj| t.iter().map(|s| 1.0 / (s * s + xj * xj).sqrt()).collect()).collect();
        let f = Field::from_rows(rows).unwrap();
        (DerivativeField::dense(DerivativeMethod::EquationBased, x, &f).unwrap(), w)
    }

    #[test]
    fn inverse_alpha_matches_the_integrability_table() {
        let delta = 0.1;
        let (df, q) = inverse_alpha(delta);
        let ones = vec![1.0; q.len()];
        for p in [1.0, 1.5, 1.9] {
            let got = w1p_norm(&df, &q, &ones, p, 0.0).unwrap().powf(p);
            let want = alpha_integrability(p, delta, 1e-10).unwrap();
            assert!((got / want - 1.0).abs() < 1e-4, "p {p}: {got} vs {want}");
        }
    }

    #[test]
    fn h1_table_of_inverse_alpha_follows_the_reference() {
        let (df, q) = inverse_alpha(1e-3);
        let ones = vec![1.0; q.len()];
        let rows: Vec<H1Row> = [0.1, 0.01, 0.001]
            .iter()
            .map(|&d| H1Row {
                delta: d,
                value: h1loc(&df, &q, &ones, d, 0.0).unwrap(),
                reference: log_growth_reference(d, 1e-12),
            })
            .collect();
        for r in &rows {
            assert!((r.value / r.reference - 1.0).abs() < 1e-4, "{r:?}");
        }
        assert!(h1_growth_mismatch(&rows).unwrap() < 1e-4);
    }

    #[test]
    fn decay_fit_recovers_the_rate_and_skips_round_off() {
        let x: Vec<f64> = (0..200).map(|j| 0.25 * j as f64).collect();
        let mut y: Vec<f64> = x.iter().map(|t| 2.0 * (-0.3 * t).exp()).collect();
        for v in y.iter_mut().skip(150) {
            *v = 1e-30;
        }
        let fit = fit_decay(&x, &y, 1.0, 49.0, 1e-12).unwrap();
        assert!((fit.slope + 0.3).abs() < 1e-12);
    }

    #[test]
    fn slab_carries_the_mass_of_the_replaced_layers() {
        let grid = VelocityGrid::new(6.0, 10, crate::grids::VelocityScheme::Uniform, 0.02).unwrap();
        let orbits = OrbitSpace::new(&grid);
        let slab = grazing_slab(&grid, &orbits, 0.02, &SlabOptions::default()).unwrap();
        let h = grid.axis_weights[0];
        let plane: f64 = (2.0 * 6.0) * (2.0 * 6.0);
        let mass: f64 = slab.weights.iter().sum();
        assert!((mass - 2.0 * h * plane).abs() < 1e-10 * mass);
        assert!(slab.velocities.iter().all(|v| (v[0] + 0.02).abs() > 0.0));
    }
}
