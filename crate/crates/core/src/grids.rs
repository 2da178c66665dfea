//! Velocity and space grids, the global Maxwellian, the exponential velocity
//! weight and the reflection `𝓡: (ξ₁, ξ₂, ξ₃) ↦ (ξ₁, −ξ₂, −ξ₃)`.

use crate::error::{invalid, LabError, Result};
use crate::quadrature::gauss_hermite;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

/// Node placement rule for the per-axis velocity nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelocityScheme {
    /// Cell-centred midpoint rule on `[−V, V]`; weights `(2V/N)³`.
    ///
    /// Spectrally accurate for Gaussian-decaying integrands (trapezoid-type
    /// rule on a periodic-like decaying function), with truncation error of
    /// order `e^{−V²/2}`.
    Uniform,
    /// Gauss–Hermite nodes for the weight `e^{−ξ²/2}` with the weight folded
    /// back into `q`; exact for `p(ξ)·M(ξ)` with `deg p ≤ 2N − 1` per axis.
    Gauss,
}

impl std::str::FromStr for VelocityScheme {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(Self::Uniform),
            "gauss" => Ok(Self::Gauss),
            other => Err(invalid("vel.scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for VelocityScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Gauss => "gauss",
        })
    }
}

/// Truncated tensor-product velocity grid.
///
/// Node `i` has axis indices `(i₁, i₂, i₃)` with `i = (i₁·N + i₂)·N + i₃`.
#[derive(Clone, Debug)]
pub struct VelocityGrid<T> {
    /// Truncation radius `V`.
    pub radius: T,
    /// Nodes per axis.
    pub n_axis: usize,
    /// Placement rule.
    pub scheme: VelocityScheme,
    /// One-dimensional axis nodes (symmetric about 0, increasing).
    pub axis: Vec<T>,
    /// One-dimensional axis weights.
    pub axis_weights: Vec<T>,
    /// Three-dimensional nodes.
    pub nodes: Vec<[T; 3]>,
    /// Quadrature weights `q_i > 0`.
    pub weights: Vec<T>,
    /// Index permutation realizing `𝓡`.
    pub reflect: Vec<usize>,
}

impl<T: Real> VelocityGrid<T> {
    /// Builds the grid and checks that no node sits on the grazing set of
    /// drift `u`.
    pub fn new(radius: T, n_axis: usize, scheme: VelocityScheme, u: T) -> Result<Self> {
        if !(radius > T::zero()) {
            return Err(invalid("vel.radius", "radius must be positive"));
        }
        if n_axis < 4 {
            return Err(invalid("vel.n", "at least 4 nodes per axis are required"));
        }
        if n_axis % 2 == 1 {
            return Err(LabError::Grazing(format!(
                "vel.n = {n_axis} is odd: the axis would carry the node ξ₁ = 0, which \
                 lies on or next to the grazing set ξ₁ + u = 0 for small drift u; use an even count"
            )));
        }
        let (axis, axis_weights) = match scheme {
            VelocityScheme::Uniform => {
                let h = T::lit(2.0) * radius / T::from_usize_lossy(n_axis);
                let axis: Vec<T> = (0..n_axis)
                    .map(|i| -radius + (T::from_usize_lossy(i) + T::lit(0.5)) * h)
                    .collect();
                (axis, vec![h; n_axis])
            }
            VelocityScheme::Gauss => {
                let (t, w) = gauss_hermite(n_axis);
                let s2 = std::f64::consts::SQRT_2;
                let axis = t.iter().map(|&t| T::lit(s2 * t)).collect();
                let weights = t
                    .iter()
                    .zip(&w)
                    .map(|(&t, &w)| T::lit(s2 * w * (t * t).exp()))
                    .collect();
                (axis, weights)
            }
        };
        let n = n_axis;
        let mut nodes = Vec::with_capacity(n * n * n);
        let mut weights = Vec::with_capacity(n * n * n);
        let mut reflect = Vec::with_capacity(n * n * n);
        for i1 in 0..n {
            for i2 in 0..n {
                for i3 in 0..n {
                    nodes.push([axis[i1], axis[i2], axis[i3]]);
                    weights.push(axis_weights[i1] * axis_weights[i2] * axis_weights[i3]);
                    reflect.push((i1 * n + (n - 1 - i2)) * n + (n - 1 - i3));
                }
            }
        }
        let grid = Self {
            radius,
            n_axis,
            scheme,
            axis,
            axis_weights,
            nodes,
            weights,
            reflect,
        };
        if let Some(a) = grid.axis.iter().find(|&&a| (a + u).abs() < T::lit(1e-12)) {
            return Err(LabError::Grazing(format!(
                "axis node ξ₁ = {a} satisfies |ξ₁ + u| < 1e-12 for u = {u}"
            )));
        }
        Ok(grid)
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Whether the grid is empty (never true for a constructed grid).
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Axis indices of node `i`.
    pub fn axis_index(&self, i: usize) -> [usize; 3] {
        let n = self.n_axis;
        [i / (n * n), (i / n) % n, i % n]
    }

    /// Flat index of axis indices.
    pub fn flat_index(&self, a: [usize; 3]) -> usize {
        (a[0] * self.n_axis + a[1]) * self.n_axis + a[2]
    }

    /// Quadrature `Σ q_i f(ξ_i)`.
    pub fn integrate(&self, f: impl Fn(&[T; 3]) -> T) -> T {
        self.nodes
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (x, &q)| acc + q * f(x))
    }

    /// Discrete inner product `⟨a b⟩ = Σ q_i a_i b_i`.
    pub fn inner(&self, a: &[T], b: &[T]) -> T {
        debug_assert_eq!(a.len(), self.len());
        a.iter()
            .zip(b)
            .zip(&self.weights)
            .fold(T::zero(), |acc, ((&x, &y), &q)| acc + q * x * y)
    }

    /// Samples `f` at every node.
    pub fn sample(&self, f: impl Fn(&[T; 3]) -> T) -> Vec<T> {
        self.nodes.iter().map(f).collect()
    }

    /// Volume of one cell (used by the self-cell regularization); for the
    /// Gauss scheme this is the local weight `q_i`.
    pub fn cell_volume(&self, i: usize) -> T {
        self.weights[i]
    }

    /// Smallest positive spacing of the ξ₁ axis.
    pub fn min_spacing(&self) -> T {
        self.axis
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(T::infinity(), |a, b| a.min(b))
    }
}

/// Spatial grid `0 = x₀ < x₁ < … < x_J = L`, geometrically graded at `x = 0`.
#[derive(Clone, Debug)]
pub struct SpatialGrid<T> {
    /// Nodes.
    pub nodes: Vec<T>,
    /// Grading ratio actually used.
    pub ratio: T,
    /// First cell width.
    pub min_cell: T,
}

impl<T: Real> SpatialGrid<T> {
    /// Builds `cells` cells on `[0, length]`: widths `min(h₀ rᵏ, H)` where the
    /// cap `H` is chosen so the widths sum to `length`. If even the uncapped
    /// geometric series is too short, the ratio is increased until it fits.
    pub fn graded(length: T, cells: usize, min_cell: T, ratio: T) -> Result<Self> {
        if !(length > T::zero()) {
            return Err(invalid("space.L", "length must be positive"));
        }
        if cells < 2 {
            return Err(invalid("space.n", "at least two cells are required"));
        }
        if !(ratio >= T::one()) || !(min_cell > T::zero()) {
            return Err(invalid("space.grade", "need ratio ≥ 1 and a positive first cell"));
        }
        let uniform = length / T::from_usize_lossy(cells);
        if min_cell >= uniform {
            return Ok(Self::uniform(length, cells));
        }
        let geometric_total = |r: T| {
            let mut s = T::zero();
            let mut h = min_cell;
            for _ in 0..cells {
                s += h;
                h *= r;
                if s > length {
                    break;
                }
            }
            s
        };
        let mut r = ratio;
        while geometric_total(r) < length {
            r *= T::lit(1.02);
        }
        let total_with_cap = |cap: T| {
            let mut s = T::zero();
            let mut h = min_cell;
            for _ in 0..cells {
                s += h.min(cap);
                h *= r;
            }
            s
        };
        let (mut lo, mut hi) = (min_cell, length);
        for _ in 0..200 {
            let mid = T::lit(0.5) * (lo + hi);
            if total_with_cap(mid) < length {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let cap = hi;
        let mut nodes = Vec::with_capacity(cells + 1);
        nodes.push(T::zero());
        let mut h = min_cell;
        let mut x = T::zero();
        for _ in 0..cells {
            x += h.min(cap);
            nodes.push(x);
            h *= r;
        }
        // Absorb the bisection residue so that x_J = L exactly.
        let scale = length / x;
        for v in nodes.iter_mut() {
            *v *= scale;
        }
        nodes[cells] = length;
        Ok(Self {
            nodes,
            ratio: r,
            min_cell: min_cell * scale,
        })
    }

    /// Uniform grid.
    pub fn uniform(length: T, cells: usize) -> Self {
        let h = length / T::from_usize_lossy(cells);
        let nodes = (0..=cells).map(|j| T::from_usize_lossy(j) * h).collect();
        Self {
            nodes,
            ratio: T::one(),
            min_cell: h,
        }
    }

    /// Builds from explicit nodes, checking the invariants.
    pub fn from_nodes(nodes: Vec<T>) -> Result<Self> {
        if nodes.len() < 3 || nodes[0] != T::zero() {
            return Err(invalid("space", "need x₀ = 0 and at least two cells"));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("space", "nodes must be strictly increasing"));
        }
        let min_cell = nodes[1] - nodes[0];
        Ok(Self {
            nodes,
            ratio: T::one(),
            min_cell,
        })
    }

    /// Number of nodes `J + 1`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Whether there are no nodes.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Right end `L`.
    pub fn length(&self) -> T {
        self.nodes[self.nodes.len() - 1]
    }

    /// Cell widths.
    pub fn widths(&self) -> Vec<T> {
        self.nodes.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index of the node nearest to `x`.
    pub fn nearest(&self, x: T) -> usize {
        let mut best = 0;
        for (j, &y) in self.nodes.iter().enumerate() {
            if (y - x).abs() < (self.nodes[best] - x).abs() {
                best = j;
            }
        }
        best
    }
}

/// Velocity weight exponents: `w_θ(ξ) = e^{θ|ξ|²}` and the derivative
/// weight exponent `θ̃`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightParams<T> {
    /// Main exponent `θ < 1/4`.
    pub theta: T,
    /// Derivative exponent `θ̃ ≤ θ/8`.
    pub theta_tilde: T,
}

impl<T: Real> WeightParams<T> {
    /// Validates `0 ≤ θ < 1/4` and `0 < θ̃ ≤ θ/8`.
    pub fn new(theta: T, theta_tilde: T) -> Result<Self> {
        if !(theta >= T::zero() && theta < T::lit(0.25)) {
            return Err(invalid("weight.theta", format!("θ = {theta} must lie in [0, 1/4)")));
        }
        if !(theta_tilde > T::zero() && theta_tilde <= theta / T::lit(8.0) * T::lit(1.0 + 1e-12)) {
            return Err(invalid(
                "weight.theta_tilde",
                format!("θ̃ = {theta_tilde} must lie in (0, θ/8]"),
            ));
        }
        Ok(Self { theta, theta_tilde })
    }
}

/// Maxwellian `ρ(2πT)^{−3/2} exp(−((v₁−u)² + v₂² + v₃²)/(2T))`.
pub fn maxwellian<T: Real>(rho: T, u: T, temp: T, v: &[T; 3]) -> Result<T> {
    if !(rho > T::zero()) {
        return Err(invalid("rho", "density must be positive"));
    }
    if !(temp > T::zero()) {
        return Err(invalid("T", "temperature must be positive"));
    }
    let d1 = v[0] - u;
    let r2 = d1 * d1 + v[1] * v[1] + v[2] * v[2];
    let two_pi_t = T::lit(2.0) * T::PI() * temp;
    Ok(rho * two_pi_t.powf(T::lit(-1.5)) * (-r2 / (T::lit(2.0) * temp)).exp())
}

/// Global Maxwellian `M(v) = (2π)^{−3/2} e^{−|v|²/2}`.
#[inline]
pub fn global_maxwellian<T: Real>(v: &[T; 3]) -> T {
    let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    T::lit((2.0 * std::f64::consts::PI).powf(-1.5)) * (-r2 * T::lit(0.5)).exp()
}

/// `√M(v)`.
#[inline]
pub fn sqrt_maxwellian<T: Real>(v: &[T; 3]) -> T {
    let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    T::lit((2.0 * std::f64::consts::PI).powf(-0.75)) * (-r2 * T::lit(0.25)).exp()
}

/// `w_θ(ξ) = e^{θ|ξ|²}` for `θ ∈ [0, 1/4)`.
pub fn w_weight<T: Real>(xi: &[T; 3], theta: T) -> Result<T> {
    if !(theta >= T::zero() && theta < T::lit(0.25)) {
        return Err(invalid("theta", format!("θ = {theta} must lie in [0, 1/4)")));
    }
    Ok(w_weight_unchecked(xi, theta))
}

/// `e^{θ|ξ|²}` without validation.
#[inline]
pub fn w_weight_unchecked<T: Real>(xi: &[T; 3], theta: T) -> T {
    (theta * (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2])).exp()
}

/// Replaces a field by `(f + f∘𝓡)/2`.
pub fn symmetrize_r<T: Real>(grid: &VelocityGrid<T>, field: &[T]) -> Result<Vec<T>> {
    if field.len() != grid.len() {
        return Err(LabError::DimensionMismatch {
            expected: grid.len(),
            found: field.len(),
        });
    }
    let half = T::lit(0.5);
    Ok(grid
        .reflect
        .iter()
        .enumerate()
        .map(|(i, &j)| half * (field[i] + field[j]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_counts_and_reflection() {
        let g = VelocityGrid::<f64>::new(6.0, 8, VelocityScheme::Uniform, 0.02).unwrap();
        assert_eq!(g.len(), 512);
        for (i, &j) in g.reflect.iter().enumerate() {
            let (a, b) = (g.nodes[i], g.nodes[j]);
            assert_eq!(a[0], b[0]);
            assert_eq!(a[1], -b[1]);
            assert_eq!(a[2], -b[2]);
            assert_eq!(g.reflect[j], i);
        }
    }

    #[test]
    fn odd_count_is_a_grazing_error() {
        let e = VelocityGrid::<f64>::new(6.0, 9, VelocityScheme::Uniform, 0.0).unwrap_err();
        assert!(matches!(e, LabError::Grazing(_)));
        assert!(e.to_string().contains("grazing"));
    }

    #[test]
    fn node_on_grazing_set_rejected() {
        // N = 4, V = 2: nodes at ±0.5, ±1.5; u = 0.5 puts one on ξ₁ = −u.
        assert!(VelocityGrid::<f64>::new(2.0, 4, VelocityScheme::Uniform, 0.5).is_err());
    }

    #[test]
    fn maxwellian_values() {
        let m0 = maxwellian::<f64>(1.0, 0.0, 1.0, &[0.0; 3]).unwrap();
        assert!((m0 - 0.063_493_635_934_240_97).abs() < 1e-15);
        let v = [0.7, -0.2, 1.1];
        let shifted = maxwellian::<f64>(1.0, 0.3, 1.0, &v).unwrap();
        let base = maxwellian(1.0, 0.0, 1.0, &[0.4, -0.2, 1.1]).unwrap();
        assert!((shifted - base).abs() < 1e-16);
        assert!(maxwellian(0.0, 0.0, 1.0, &v).is_err());
        assert!(maxwellian(1.0, 0.0, -1.0, &v).is_err());
    }

    #[test]
    fn mass_and_odd_moment() {
        let g = VelocityGrid::<f64>::new(6.0, 16, VelocityScheme::Uniform, 0.02).unwrap();
        let mass = g.integrate(global_maxwellian);
        assert!((mass - 1.0).abs() < 1e-4, "{mass}");
        let odd = g.integrate(|v| v[0] * global_maxwellian(v));
        assert!(odd.abs() < 1e-10);
    }

    #[test]
    fn gauss_scheme_is_exact_on_low_moments() {
        let g = VelocityGrid::<f64>::new(6.0, 8, VelocityScheme::Gauss, 0.02).unwrap();
        let m4 = g.integrate(|v| v[0].powi(4) * global_maxwellian(v));
        assert!((m4 - 3.0).abs() < 1e-11, "{m4}");
    }

    #[test]
    fn weight_values() {
        assert_eq!(w_weight(&[0.0; 3], 0.1).unwrap(), 1.0);
        let xi = [2.0, 2.0, 0.0];
        assert!((w_weight(&xi, 0.125).unwrap() - std::f64::consts::E).abs() < 1e-15);
        assert!(w_weight(&xi, 0.25).is_err());
        assert!(WeightParams::new(0.3, 0.01).is_err());
        assert!(WeightParams::new(0.1, 0.1 / 8.0).is_ok());
    }

    #[test]
    fn symmetrize_kills_odd_part() {
        let g = VelocityGrid::<f64>::new(6.0, 8, VelocityScheme::Uniform, 0.02).unwrap();
        let f = g.sample(|v| v[1] * global_maxwellian(v));
        let s = symmetrize_r(&g, &f).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
        let rad = g.sample(|v| (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).exp());
        assert_eq!(symmetrize_r(&g, &rad).unwrap(), rad);
    }

    #[test]
    fn spatial_grid_is_graded_and_ends_at_l() {
        let s = SpatialGrid::<f64>::graded(3000.0, 300, 1e-4, 1.15).unwrap();
        assert_eq!(s.nodes[0], 0.0);
        assert_eq!(s.length(), 3000.0);
        assert!(s.nodes.windows(2).all(|w| w[1] > w[0]));
        assert!(s.widths()[0] < 2e-4);
    }

    #[test]
    fn f32_grid_builds() {
        let g = VelocityGrid::<f32>::new(6.0, 8, VelocityScheme::Uniform, 0.02).unwrap();
        let mass = g.integrate(global_maxwellian);
        assert!((mass - 1.0).abs() < 1e-3);
    }
}
