//! Kinetic weight `α = χ(α̃)`, `α̃(x,ξ) = √((ξ₁+u)² + (cν₀x)²)`, the cutoff
//! `χ`, and quadrature checks of the characteristic estimates built on them.

use crate::error::{invalid, LabError, Result};
use crate::grids::VelocityGrid;
use crate::quadrature::{adaptive, adaptive_pts};
use crate::scalar::{dist, norm2, Real};
use crate::collision::nu_radial;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Growth constant `c` of the kinetic weight.
pub const GROWTH_CONSTANT: f64 = 0.125;

/// `χ(s)` without the sign check.
///
/// `χ(s) = s` on `[0, 1/2]`, `χ(s) = 1 − (1−t)³/2` with `t = (s − 1/2)/(3/2)`
/// on `[1/2, 2]`, and `χ(s) = 1` beyond. This is the cubic Hermite blend with
/// end values `(1/2, 1)` and end slopes `(1, 0)`; its slope `(1−t)²` lies in
/// `[0, 1]`.
#[inline]
pub fn chi_unchecked<T: Real>(s: T) -> T {
    let half = T::lit(0.5);
    if s <= half {
        s
    } else if s >= T::lit(2.0) {
        T::one()
    } else {
        let r = T::one() - (s - half) / T::lit(1.5);
        T::one() - half * r * r * r
    }
}

/// `χ(s)`; negative arguments are rejected.
pub fn chi<T: Real>(s: T) -> Result<T> {
    if s < T::zero() || s.is_nan() {
        return Err(invalid("s", format!("χ is defined on [0, ∞), got {s}")));
    }
    Ok(chi_unchecked(s))
}

/// `χ′(s)`.
#[inline]
pub fn chi_prime<T: Real>(s: T) -> T {
    let half = T::lit(0.5);
    if s <= half {
        T::one()
    } else if s >= T::lit(2.0) {
        T::zero()
    } else {
        let r = T::one() - (s - half) / T::lit(1.5);
        r * r
    }
}

/// Dense-sampling audit of the `χ` contract.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChiAudit {
    /// Sample count.
    pub samples: usize,
    /// `max (sχ′(s) − 4χ(s))`.
    pub max_s_chi_prime_minus_4chi: f64,
    /// `max χ′`.
    pub max_chi_prime: f64,
    /// `min χ′`.
    pub min_chi_prime: f64,
    /// `max |χ′ − (χ(s+h) − χ(s−h))/2h|` (C¹ consistency).
    pub derivative_consistency: f64,
    /// `χ(0.25)`.
    pub chi_quarter: f64,
    /// `χ(5)`.
    pub chi_five: f64,
}

/// Samples `χ` on `[0, s_max]` at `samples` equispaced points.
pub fn audit_chi(samples: usize, s_max: f64) -> ChiAudit {
    let mut out = ChiAudit {
        samples,
        max_s_chi_prime_minus_4chi: f64::NEG_INFINITY,
        max_chi_prime: f64::NEG_INFINITY,
        min_chi_prime: f64::INFINITY,
        derivative_consistency: 0.0,
        chi_quarter: chi_unchecked(0.25),
        chi_five: chi_unchecked(5.0),
    };
    let h = 1e-6;
    for k in 0..samples {
        let s = s_max * k as f64 / (samples - 1).max(1) as f64;
        let c = chi_unchecked(s);
        let d = chi_prime(s);
        out.max_s_chi_prime_minus_4chi = out.max_s_chi_prime_minus_4chi.max(s * d - 4.0 * c);
        out.max_chi_prime = out.max_chi_prime.max(d);
        out.min_chi_prime = out.min_chi_prime.min(d);
        if s > h {
            let fd = (chi_unchecked(s + h) - chi_unchecked(s - h)) / (2.0 * h);
            out.derivative_consistency = out.derivative_consistency.max((fd - d).abs());
        }
    }
    out
}

/// Parameters of the kinetic weight.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WeightSpec<T> {
    /// Growth constant `c = 1/8`.
    pub c: T,
    /// Frequency lower bound `ν₀` (from the assembled operator).
    pub nu0: T,
    /// Drift.
    pub u: T,
}

impl<T: Real> WeightSpec<T> {
    /// Builds the weight for a computed `ν₀ > 0`.
    pub fn new(nu0: T, u: T) -> Result<Self> {
        if !(nu0 > T::zero()) || !nu0.is_finite() {
            return Err(invalid("nu0", format!("must be positive, got {nu0}")));
        }
        Ok(Self {
            c: T::lit(GROWTH_CONSTANT),
            nu0,
            u,
        })
    }

    /// `α̃(x, ξ)`; depends on `ξ` through `ξ₁` only.
    #[inline]
    pub fn alpha_tilde(&self, x: T, xi1: T) -> T {
        let a = xi1 + self.u;
        let b = self.c * self.nu0 * x;
        a.hypot(b)
    }

    /// `α(x, ξ) = χ(α̃(x, ξ))`.
    #[inline]
    pub fn alpha(&self, x: T, xi1: T) -> T {
        chi_unchecked(self.alpha_tilde(x, xi1))
    }
}

/// One row of a lemma verification table: the worst inequality of a sample.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LemmaRow {
    /// Sample index.
    pub sample: usize,
    /// Left side of the tightest inequality.
    pub lhs: f64,
    /// Right side of the tightest inequality.
    pub rhs: f64,
    /// `(rhs − lhs)/max(|lhs|, |rhs|, 1e−300)`.
    pub margin: f64,
}

/// Verdict of a sampled inequality check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LemmaVerdict {
    /// Check name.
    pub name: String,
    /// Number of samples.
    pub samples: usize,
    /// Samples whose worst margin is below `−slack`.
    pub violations: usize,
    /// Smallest margin seen.
    pub worst_margin: f64,
    /// Relative slack.
    pub slack: f64,
    /// Per-sample rows.
    pub rows: Vec<LemmaRow>,
}

impl LemmaVerdict {
    /// Whether no sample violated the inequality.
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn tight(lhs: f64, rhs: f64) -> f64 {
    (rhs - lhs) / lhs.abs().max(rhs.abs()).max(1e-300)
}

/// Draws admissible `(x, ξ₁, s)`: `x ≥ 0`, `s ≥ 0`, `x − s(ξ₁+u) ≥ 0`.
/// About 1% of the samples sit on the grazing line `ξ₁ = −u`, 2% at `x = 0`,
/// 2% at `s = 0`, and 5% on the boundary `x = s(ξ₁+u)`.
fn velocity_samples(u: f64, samples: usize, seed: u64) -> Vec<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let kind: f64 = rng.random();
            let xi1 = if kind < 0.01 { -u } else { rng.random_range(-6.0..6.0) };
            let a = xi1 + u;
            let x = if rng.random::<f64>() < 0.02 {
                0.0
            } else {
                10f64.powf(rng.random_range(-4.0..1.5))
            };
            let s_max = if a > 0.0 { x / a } else { 30.0 };
            let r: f64 = rng.random();
            let s = if r < 0.02 {
                0.0
            } else if r < 0.07 {
                s_max
            } else {
                rng.random_range(0.0..=1.0) * s_max
            };
            // Rounding in x/a may push y below zero by one ulp.
            let s = if a > 0.0 && x - s * a < 0.0 { s_max * (1.0 - 1e-15) } else { s };
            (x, xi1, s)
        })
        .collect()
}

/// Checks both characteristic estimates for `α̃` (rate `cν₀/2`) and `α`
/// (rate `2cν₀`) on random admissible samples with exact evaluations.
pub fn verify_velocity_lemma(spec: &WeightSpec<f64>, samples: usize, seed: u64, slack: f64) -> LemmaVerdict {
    let pts = velocity_samples(spec.u, samples, seed);
    let (c, nu0) = (spec.c, spec.nu0);
    let rows: Vec<LemmaRow> = pts
        .iter()
        .enumerate()
        .map(|(k, &(x, xi1, s))| {
            let y = x - s * (xi1 + spec.u);
            let at_x = spec.alpha_tilde(x, xi1);
            let at_y = spec.alpha_tilde(y, xi1);
            let a_x = spec.alpha(x, xi1);
            let a_y = spec.alpha(y, xi1);
            let e1 = (c * nu0 * s / 2.0).exp();
            let e2 = (2.0 * c * nu0 * s).exp();
            let checks = [
                (at_y / e1, at_x),
                (at_x, e1 * at_y),
                (a_y / e2, a_x),
                (a_x, e2 * a_y),
            ];
            let (lhs, rhs) = checks
                .iter()
                .copied()
                .min_by(|p, q| tight(p.0, p.1).total_cmp(&tight(q.0, q.1)))
                .expect("four checks");
            LemmaRow {
                sample: k,
                lhs,
                rhs,
                margin: tight(lhs, rhs),
            }
        })
        .collect();
    summarize("velocity", rows, slack)
}

fn summarize(name: &str, rows: Vec<LemmaRow>, slack: f64) -> LemmaVerdict {
    let violations = rows.iter().filter(|r| r.margin < -slack).count();
    let worst = rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    LemmaVerdict {
        name: name.into(),
        samples: rows.len(),
        violations,
        worst_margin: worst,
        slack,
        rows,
    }
}

/// Potential of a uniform ball of volume `vol` centred at distance `r`:
/// `vol/r` outside, `2π(R² − r²/3)` inside. This is the cell-averaged
/// `∫ dξ′/|ξ−ξ′|` used for the singular factor near a node.
pub fn ball_potential(r: f64, vol: f64) -> f64 {
    let big_r = (3.0 * vol / (4.0 * std::f64::consts::PI)).cbrt();
    if r >= big_r {
        vol / r
    } else {
        2.0 * std::f64::consts::PI * (big_r * big_r - r * r / 3.0)
    }
}

/// Integrand family of the singular-integral estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NlnVariant {
    /// `e^{−ν(t−s)/2} ∫ e^{−C|ξ−ξ′|²}|ξ−ξ′|^{−1} α(·,ξ′)^{−1}`.
    Singular,
    /// `e^{−ν(t−s)} ∫ e^{−C|ξ′|²} α(·,ξ′)^{−1}`.
    Inner,
    /// `e^{−ν(t−s)} ∫ w^{−1}(ξ′) ∫ e^{−C|ξ′−ξ″|²}|ξ′−ξ″|^{−1} α(·,ξ″)^{−1}`.
    Two,
}

/// One evaluation point of an estimate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NlnSample {
    /// Position.
    pub x: f64,
    /// Velocity.
    pub xi: [f64; 3],
    /// Horizon `t`.
    pub t: f64,
    /// Window `T ≤ t`.
    pub big_t: f64,
}

/// Value and normalized ratio of one estimate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NlnValue {
    /// The double integral.
    pub value: f64,
    /// The bound it is compared with (`t/α` for `T > 1`,
    /// `(√T + T ln t)/α` for `T ≤ 1`).
    pub normalizer: f64,
    /// `value / normalizer`.
    pub ratio: f64,
}

/// Velocity quadrature for the estimates: the grid's `ξ₁` axis with the
/// transverse sums folded in, per variant.
#[derive(Clone, Debug)]
pub struct NlnQuadrature {
    nodes: Vec<[f64; 3]>,
    weights: Vec<f64>,
    axis1: Vec<usize>,
    xi1_axis: Vec<f64>,
    /// Folded weights of [`NlnVariant::Two`] (independent of `ξ`).
    two: Vec<f64>,
    /// Gaussian rate `C`.
    pub c_gauss: f64,
}

impl NlnQuadrature {
    /// Prepares the quadrature on a grid.
    pub fn new<T: Real>(grid: &VelocityGrid<T>, c_gauss: f64, theta: f64) -> Self {
        let nodes: Vec<[f64; 3]> = grid
            .nodes
            .iter()
            .map(|v| [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()])
            .collect();
        let weights: Vec<f64> = grid.weights.iter().map(|w| w.to_f64_lossy()).collect();
        let axis1: Vec<usize> = (0..nodes.len()).map(|i| grid.axis_index(i)[0]).collect();
        let xi1_axis = grid.axis.iter().map(|a| a.to_f64_lossy()).collect();
        let n_axis = grid.n_axis;
        let two_full: Vec<f64> = (0..nodes.len())
            .into_par_iter()
            .map(|j| {
                (0..nodes.len())
                    .map(|i| {
                        let r = dist(&nodes[i], &nodes[j]);
                        weights[i] * (-theta * norm2(&nodes[i])).exp() * (-c_gauss * r * r).exp()
                            * ball_potential(r, weights[j])
                    })
                    .sum()
            })
            .collect();
        let mut two = vec![0.0; n_axis];
        for (j, v) in two_full.iter().enumerate() {
            two[axis1[j]] += v;
        }
        Self {
            nodes,
            weights,
            axis1,
            xi1_axis,
            two,
            c_gauss,
        }
    }

    fn folded(&self, variant: NlnVariant, xi: &[f64; 3]) -> Vec<f64> {
        if variant == NlnVariant::Two {
            return self.two.clone();
        }
        let mut out = vec![0.0; self.xi1_axis.len()];
        for (j, v) in self.nodes.iter().enumerate() {
            let w = match variant {
                NlnVariant::Singular => {
                    let r = dist(xi, v);
                    (-self.c_gauss * r * r).exp() * ball_potential(r, self.weights[j])
                }
                NlnVariant::Inner => self.weights[j] * (-self.c_gauss * norm2(v)).exp(),
                NlnVariant::Two => unreachable!(),
            };
            out[self.axis1[j]] += w;
        }
        out
    }

    /// Evaluates one estimate.
    pub fn evaluate(
        &self,
        spec: &WeightSpec<f64>,
        variant: NlnVariant,
        s: &NlnSample,
        tol: f64,
    ) -> Result<NlnValue> {
        let a = s.xi[0] + spec.u;
        if s.x < 0.0 || s.big_t <= 0.0 || s.big_t > s.t || s.x - s.big_t * a < -1e-12 * s.x.max(1.0) {
            return Err(invalid(
                "sample",
                format!(
                    "inadmissible geometry x = {}, T = {}, t = {}, ξ₁+u = {a}",
                    s.x, s.big_t, s.t
                ),
            ));
        }
        let folded = self.folded(variant, &s.xi);
        let nu = nu_radial(norm2(&s.xi).sqrt());
        let rate = match variant {
            NlnVariant::Singular => nu / 2.0,
            _ => nu,
        };
        let f = |sigma: f64| -> f64 {
            let y = (s.x - sigma * a).max(0.0);
            let inner: f64 = folded
                .iter()
                .zip(&self.xi1_axis)
                .map(|(w, x1)| w / spec.alpha(y, *x1))
                .sum();
            (-rate * sigma).exp() * inner
        };
        let mut pts = vec![0.0];
        for k in [0.25, 1.0, 4.0, 16.0] {
            let p = k / rate;
            if p < s.big_t {
                pts.push(p);
            }
        }
        pts.push(s.big_t);
        let q = adaptive_pts(f, &pts, 0.0, tol, 4000);
        let alpha_x = spec.alpha(s.x, s.xi[0]);
        let normalizer = if s.big_t > 1.0 {
            s.t / alpha_x
        } else {
            (s.big_t.sqrt() + s.big_t * s.t.ln()) / alpha_x
        };
        Ok(NlnValue {
            value: q.value,
            normalizer,
            ratio: q.value / normalizer,
        })
    }
}

/// Window regime of a sample family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NlnRegime {
    /// `T = t`.
    Long,
    /// `T` log-uniform in `[10⁻³, 1]`.
    Short,
}

/// Draws admissible samples: `ξ` uniform in `[−4, 4]³`, `x` at or beyond
/// `T·max(ξ₁+u, 0)`.
pub fn nln_samples(u: f64, t: f64, regime: NlnRegime, samples: usize, seed: u64) -> Vec<NlnSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let xi = [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            ];
            let big_t = match regime {
                NlnRegime::Long => t,
                NlnRegime::Short => 10f64.powf(rng.random_range(-3.0..0.0)),
            };
            let base = big_t * (xi[0] + u).max(0.0);
            let extra = if rng.random::<f64>() < 0.1 {
                0.0
            } else {
                10f64.powf(rng.random_range(-4.0..1.0))
            };
            NlnSample { x: base + extra, xi, t, big_t }
        })
        .collect()
}

/// Fitted constant of one estimate family.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NlnFit {
    /// Variant.
    pub variant: NlnVariant,
    /// Regime.
    pub regime: NlnRegime,
    /// Sample count.
    pub samples: usize,
    /// Empirical max of the ratios.
    pub constant: f64,
    /// Per-sample values.
    pub values: Vec<NlnValue>,
}

/// Evaluates a sample family and fits the constant as the empirical max.
pub fn fit_nln(
    quad: &NlnQuadrature,
    spec: &WeightSpec<f64>,
    variant: NlnVariant,
    regime: NlnRegime,
    samples: &[NlnSample],
    tol: f64,
) -> Result<NlnFit> {
    let values: Vec<NlnValue> = samples
        .par_iter()
        .map(|s| quad.evaluate(spec, variant, s, tol))
        .collect::<Result<_>>()?;
    let constant = values.iter().map(|v| v.ratio).fold(0.0, f64::max);
    if !constant.is_finite() {
        return Err(LabError::Diagnostic(format!("{variant:?} ratio is not finite")));
    }
    Ok(NlnFit {
        variant,
        regime,
        samples: samples.len(),
        constant,
        values,
    })
}

/// `∬_{[δ,1]×[0,1]} (ξ₁² + x²)^{−p/2} dξ₁ dx`.
///
/// At `δ = 0` the polar form `2∫₀^{π/4} sec^{2−p}φ dφ/(2−p)` is used; for
/// `δ > 0` a nested adaptive rule.
pub fn alpha_integrability(p: f64, delta: f64, tol: f64) -> Result<f64> {
    if !(1.0..=2.0).contains(&p) {
        return Err(invalid("p", format!("must lie in [1, 2], got {p}")));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(invalid("delta", format!("must lie in [0, 1), got {delta}")));
    }
    if delta == 0.0 {
        if p >= 2.0 {
            return Err(invalid("p", "the integral diverges at p = 2 and δ = 0"));
        }
        let e = 2.0 - p;
        let q = adaptive(
            |phi: f64| phi.cos().powf(-e) / e,
            0.0,
            std::f64::consts::FRAC_PI_4,
            0.0,
            tol,
            2000,
        );
        return Ok(2.0 * q.value);
    }
    let inner = |x: f64| -> f64 {
        let pts = [0.0, x.min(1.0), 1.0];
        adaptive_pts(|s: f64| (s * s + x * x).powf(-p / 2.0), &pts, 0.0, tol * 0.1, 2000).value
    };
    let mut pts = vec![delta];
    let mut b = delta * 10.0;
    while b < 1.0 {
        pts.push(b);
        b *= 10.0;
    }
    pts.push(1.0);
    Ok(adaptive_pts(inner, &pts, 0.0, tol, 4000).value)
}

/// The 1-D reference `∫_δ¹ (1/x) arctan(1/x) dx` for the logarithmic growth
/// of the `p = 2` table.
pub fn log_growth_reference(delta: f64, tol: f64) -> f64 {
    let mut pts = vec![delta];
    let mut b = delta * 10.0;
    while b < 1.0 {
        pts.push(b);
        b *= 10.0;
    }
    pts.push(1.0);
    adaptive_pts(|x: f64| (1.0 / x).atan() / x, &pts, 0.0, tol, 4000).value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::VelocityScheme;

    #[test]
    fn chi_contract() {
        assert_eq!(chi(0.25).unwrap(), 0.25);
        assert_eq!(chi(5.0).unwrap(), 1.0);
        assert_eq!(chi(0.5).unwrap(), 0.5);
        assert_eq!(chi(2.0).unwrap(), 1.0);
        assert!(chi(-1.0).is_err());
        let a = audit_chi(100_001, 3.0);
        assert!(a.max_s_chi_prime_minus_4chi <= 0.0);
        assert!(a.max_chi_prime <= 1.0 && a.min_chi_prime >= 0.0);
        assert!(a.derivative_consistency < 1e-6);
        assert_eq!(chi(0.25f32).unwrap(), 0.25f32);
    }

    #[test]
    fn alpha_definitions() {
        let w = WeightSpec::<f64>::new(5.2, 0.02).unwrap();
        assert!((w.alpha(0.0, 0.28) - 0.3).abs() < 1e-15);
        assert_eq!(w.alpha(100.0, 0.28), 1.0);
        let at = w.alpha_tilde(1.3, -0.7);
        let lhs = at * at - (-0.7f64 + 0.02).powi(2) - (0.125 * 5.2 * 1.3f64).powi(2);
        assert!(lhs.abs() < 1e-14);
        assert!(WeightSpec::new(0.0, 0.02).is_err());
    }

    #[test]
    fn velocity_lemma_small_batch() {
        let w = WeightSpec::<f64>::new(5.2, 0.02).unwrap();
        let v = verify_velocity_lemma(&w, 2000, 7, 1e-12);
        assert!(v.passed(), "worst margin {}", v.worst_margin);
    }

    #[test]
    fn polar_value_at_p_one() {
        let v = alpha_integrability(1.0, 0.0, 1e-12).unwrap();
        assert!((v - 2.0 * (1.0 + 2f64.sqrt()).ln()).abs() < 1e-10);
        assert!(alpha_integrability(2.5, 0.0, 1e-10).is_err());
        assert!(alpha_integrability(2.0, 0.0, 1e-10).is_err());
        let nested = alpha_integrability(1.0, 1e-9, 1e-10).unwrap();
        assert!((nested - v).abs() < 1e-6, "{nested} {v}");
    }

    #[test]
    fn p_two_matches_log_reference() {
        for d in [0.1, 0.01, 0.001] {
            let a = alpha_integrability(2.0, d, 1e-10).unwrap();
            let b = log_growth_reference(d, 1e-12);
            assert!((a - b).abs() < 1e-7 * b, "{a} {b}");
        }
    }

    #[test]
    fn nln_rejects_bad_geometry() {
        let g = VelocityGrid::<f64>::new(6.0, 8, VelocityScheme::Uniform, 0.02).unwrap();
        let q = NlnQuadrature::new(&g, 1.0 / 16.0, 0.1);
        let w = WeightSpec::<f64>::new(5.2, 0.02).unwrap();
        let s = NlnSample { x: 0.0, xi: [1.0, 0.0, 0.0], t: 8.0, big_t: 1.0 };
        assert!(q.evaluate(&w, NlnVariant::Singular, &s, 1e-8).is_err());
        let s = NlnSample { x: 2.0, xi: [1.0, 0.0, 0.0], t: 8.0, big_t: 1.0 };
        let v = q.evaluate(&w, NlnVariant::Singular, &s, 1e-8).unwrap();
        assert!(v.value > 0.0 && v.ratio.is_finite());
    }
}
