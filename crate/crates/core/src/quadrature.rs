//! One-dimensional quadrature: adaptive Gauss–Kronrod, Gauss–Legendre and
//! Gauss–Hermite rules, and the exponential-weight cell integrals used by the
//! characteristic sweeps.

use crate::scalar::Real;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Outcome of an adaptive integration.
#[derive(Clone, Copy, Debug)]
pub struct QuadResult<T> {
    /// Integral estimate.
    pub value: T,
    /// Estimated absolute error.
    pub error: T,
    /// Number of integrand evaluations.
    pub evaluations: usize,
    /// Whether the requested tolerance was met.
    pub converged: bool,
}

/// Single 15-point Gauss–Kronrod panel on `[a, b]`; returns `(value, error)`.
pub fn gauss_kronrod_15<T: Real, F: FnMut(T) -> T>(f: &mut F, a: T, b: T) -> (T, T) {
    let half = T::lit(0.5);
    let c = half * (a + b);
    let h = half * (b - a);
    let fc = f(c);
    let mut kronrod = fc * T::lit(WGK[7]);
    let mut gauss = fc * T::lit(WG[3]);
    for j in 0..7 {
        let dx = h * T::lit(XGK[j]);
        let s = f(c - dx) + f(c + dx);
        kronrod += T::lit(WGK[j]) * s;
        if j % 2 == 1 {
            gauss += T::lit(WG[j / 2]) * s;
        }
    }
    let value = kronrod * h;
    let error = ((kronrod - gauss) * h).abs();
    (value, error)
}

/// Globally adaptive Gauss–Kronrod integration over `[a, b]`.
///
/// The panel with the largest error estimate is bisected until the summed
/// error is below `max(abs_tol, rel_tol·|value|)` or `max_panels` is reached.
pub fn adaptive<T: Real, F: FnMut(T) -> T>(
    mut f: F,
    a: T,
    b: T,
    abs_tol: T,
    rel_tol: T,
    max_panels: usize,
) -> QuadResult<T> {
    let mut panels: Vec<(T, T, T, T)> = Vec::with_capacity(64);
    let (v, e) = gauss_kronrod_15(&mut f, a, b);
    panels.push((a, b, v, e));
    let mut evaluations = 15;
    loop {
        let (value, error) = panels
            .iter()
            .fold((T::zero(), T::zero()), |(s, r), p| (s + p.2, r + p.3));
        let target = abs_tol.max(rel_tol * value.abs());
        if error <= target || panels.len() >= max_panels {
            return QuadResult {
                value,
                error,
                evaluations,
                converged: error <= target,
            };
        }
        let (idx, _) = panels
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(bi, be), (i, p)| {
                if p.3 > be {
                    (i, p.3)
                } else {
                    (bi, be)
                }
            });
        let (pa, pb, _, _) = panels.swap_remove(idx);
        let mid = T::lit(0.5) * (pa + pb);
        let (v1, e1) = gauss_kronrod_15(&mut f, pa, mid);
        let (v2, e2) = gauss_kronrod_15(&mut f, mid, pb);
        evaluations += 30;
        panels.push((pa, mid, v1, e1));
        panels.push((mid, pb, v2, e2));
    }
}

/// Adaptive integration over consecutive breakpoints `pts[0] < pts[1] < …`.
///
/// Kinks and integrable endpoint singularities should sit on breakpoints.
pub fn adaptive_pts<T: Real, F: FnMut(T) -> T>(
    mut f: F,
    pts: &[T],
    abs_tol: T,
    rel_tol: T,
    max_panels: usize,
) -> QuadResult<T> {
    let mut total = QuadResult {
        value: T::zero(),
        error: T::zero(),
        evaluations: 0,
        converged: true,
    };
    let pieces = T::from_usize_lossy(pts.len().saturating_sub(1).max(1));
    for w in pts.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        let r = adaptive(&mut f, w[0], w[1], abs_tol / pieces, rel_tol, max_panels);
        total.value += r.value;
        total.error += r.error;
        total.evaluations += r.evaluations;
        total.converged &= r.converged;
    }
    total
}

/// Adaptive integration over `[a, ∞)` via the map `x = a + t/(1−t)`.
pub fn adaptive_semi_infinite<T: Real, F: FnMut(T) -> T>(
    mut f: F,
    a: T,
    abs_tol: T,
    rel_tol: T,
    max_panels: usize,
) -> QuadResult<T> {
    let one = T::one();
    adaptive(
        |t: T| {
            let s = one - t;
            if s <= T::zero() {
                return T::zero();
            }
            let x = a + t / s;
            let v = f(x) / (s * s);
            if v.is_finite() {
                v
            } else {
                T::zero()
            }
        },
        T::zero(),
        one,
        abs_tol,
        rel_tol,
        max_panels,
    )
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Newton iteration on `P_n`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pnm1 = if n == 0 { 0.0 } else { p0 };
            dp = nf * (x * pn - pnm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Gauss–Hermite nodes and weights for the weight `e^{-t²}` (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jac[(k, k - 1)] = b;
        jac[(k - 1, k)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jac);
    let mu0 = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize to remove eigen-solver round-off.
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    pairs.into_iter().unzip()
}

/// `(1 − e^{-τ})/τ`, accurate for small `τ`.
#[inline]
pub fn phi1(tau: f64) -> f64 {
    if tau.abs() < 1e-4 {
        1.0 - tau / 2.0 + tau * tau / 6.0 - tau * tau * tau / 24.0
    } else {
        -(-tau).exp_m1() / tau
    }
}

/// `1 − (1 − e^{-τ})/τ`, accurate for small `τ`.
#[inline]
pub fn one_minus_phi1(tau: f64) -> f64 {
    if tau.abs() < 1e-3 {
        tau / 2.0 - tau * tau / 6.0 + tau * tau * tau / 24.0 - tau.powi(4) / 120.0
    } else {
        1.0 - phi1(tau)
    }
}

/// Exact weights for `∫_0^Δ e^{-a(Δ-y)} q(y) dy` with `q` linear between its
/// endpoint values `q(0)=q_up`, `q(Δ)=q_down`.
///
/// Returns `(decay, w_up, w_down)` with the integral equal to
/// `w_up·q_up + w_down·q_down` and `decay = e^{-aΔ}`; `a > 0`.
#[inline]
pub fn exp_linear_weights(a: f64, delta: f64) -> (f64, f64, f64) {
    let tau = a * delta;
    let e = (-tau).exp();
    let p = phi1(tau);
    // w_down = Δ(1 − φ1)/τ ; w_up = Δ(φ1 − e)/τ.
    if tau < 1e-12 {
        return (e, 0.5 * delta, 0.5 * delta);
    }
    let w_down = delta * one_minus_phi1(tau) / tau;
    let w_up = delta * (p - e) / tau;
    (e, w_up, w_down)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gk_integrates_polynomial_exactly() {
        let (v, _) = gauss_kronrod_15(&mut |x: f64| x.powi(10), -1.0, 1.0);
        assert!((v - 2.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_handles_sqrt_singularity() {
        let r = adaptive(|x: f64| 1.0 / x.sqrt(), 0.0, 1.0, 1e-10, 1e-10, 200);
        assert!((r.value - 2.0).abs() < 1e-8, "{}", r.value);
    }

    #[test]
    fn semi_infinite_gaussian() {
        let r = adaptive_semi_infinite(|x: f64| (-x * x).exp(), 0.0, 1e-12, 1e-12, 200);
        assert!((r.value - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-10);
    }

    #[test]
    fn legendre_and_hermite_rules() {
        let (x, w) = gauss_legendre(7);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        assert!((s - 2.0 / 13.0).abs() < 1e-14);
        let (x, w) = gauss_hermite(8);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert!((s - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-13);
    }

    #[test]
    fn exp_weights_reproduce_linear_sources() {
        let (a, d) = (3.0, 0.7);
        let (e, wu, wd) = exp_linear_weights(a, d);
        // q ≡ 1 gives (1 − e)/a.
        assert!((wu + wd - (1.0 - e) / a).abs() < 1e-15);
        // q(y) = y gives ∫ y e^{-a(Δ-y)} dy.
        let exact = d / a - (1.0 - e) / (a * a);
        assert!((wd * d - exact).abs() < 1e-14);
    }
}
