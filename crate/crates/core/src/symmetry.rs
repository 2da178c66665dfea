//! Orbit space of the dihedral group D4 acting on the transverse indices
//! `(i₂, i₃)` of a tensor velocity grid.
//!
//! The group is generated by `i₂ ↔ i₃`, `i₂ ↦ N−1−i₂` and `i₃ ↦ N−1−i₃`; it
//! contains `𝓡`. Every operator in this crate commutes with it, and fields
//! built from D4-invariant data stay D4-invariant, so the solvers work with
//! one unknown per orbit.

use crate::grids::VelocityGrid;
use crate::scalar::Real;

/// Reduced index space of D4 orbits.
#[derive(Clone, Debug)]
pub struct OrbitSpace {
    /// Nodes per axis of the underlying grid.
    pub n_axis: usize,
    /// Orbits of one `(i₂, i₃)` plane; each entry lists `i₂·N + i₃`.
    pub plane_orbits: Vec<Vec<usize>>,
    /// Orbit of each plane index.
    pub plane_orbit_of: Vec<usize>,
    /// Reduced index of each full node.
    pub full_to_red: Vec<usize>,
    /// Representative full node of each reduced index.
    pub rep: Vec<usize>,
    /// Members of each reduced index.
    pub members: Vec<Vec<usize>>,
    /// Orbit weights `Q_r = Σ_{i∈r} q_i`.
    pub weights: Vec<f64>,
}

impl OrbitSpace {
    /// Builds the orbit space of a grid.
    pub fn new<T: Real>(grid: &VelocityGrid<T>) -> Self {
        let n = grid.n_axis;
        let mut plane_orbit_of = vec![usize::MAX; n * n];
        let mut plane_orbits: Vec<Vec<usize>> = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if plane_orbit_of[a * n + b] != usize::MAX {
                    continue;
                }
                let id = plane_orbits.len();
                let (ra, rb) = (n - 1 - a, n - 1 - b);
                let mut orbit: Vec<usize> = [
                    (a, b),
                    (ra, b),
                    (a, rb),
                    (ra, rb),
                    (b, a),
                    (rb, a),
                    (b, ra),
                    (rb, ra),
                ]
                .iter()
                .map(|&(x, y)| x * n + y)
                .collect();
                orbit.sort_unstable();
                orbit.dedup();
                for &p in &orbit {
                    plane_orbit_of[p] = id;
                }
                plane_orbits.push(orbit);
            }
        }
        let npo = plane_orbits.len();
        let mut full_to_red = vec![0; grid.len()];
        let mut members = vec![Vec::new(); n * npo];
        for i in 0..grid.len() {
            let [i1, i2, i3] = grid.axis_index(i);
            let r = i1 * npo + plane_orbit_of[i2 * n + i3];
            full_to_red[i] = r;
            members[r].push(i);
        }
        let rep = members.iter().map(|m| m[0]).collect();
        let weights = members
            .iter()
            .map(|m| m.iter().map(|&i| grid.weights[i].to_f64_lossy()).sum())
            .collect();
        Self {
            n_axis: n,
            plane_orbits,
            plane_orbit_of,
            full_to_red,
            rep,
            members,
            weights,
        }
    }

    /// Number of reduced unknowns.
    pub fn len(&self) -> usize {
        self.rep.len()
    }

    /// Whether the space is empty.
    pub fn is_empty(&self) -> bool {
        self.rep.is_empty()
    }

    /// Number of orbits per `(i₂, i₃)` plane.
    pub fn plane_len(&self) -> usize {
        self.plane_orbits.len()
    }

    /// ξ₁ axis index of a reduced index.
    pub fn axis1(&self, r: usize) -> usize {
        r / self.plane_orbits.len()
    }

    /// Weighted orbit average of a full field (the D4 projection, expressed
    /// in reduced coordinates).
    pub fn reduce<T: Real>(&self, grid: &VelocityGrid<T>, field: &[T]) -> Vec<f64> {
        self.members
            .iter()
            .zip(&self.weights)
            .map(|(m, &w)| {
                m.iter()
                    .map(|&i| grid.weights[i].to_f64_lossy() * field[i].to_f64_lossy())
                    .sum::<f64>()
                    / w
            })
            .collect()
    }

    /// Copies reduced values back onto every orbit member.
    pub fn expand(&self, red: &[f64]) -> Vec<f64> {
        self.full_to_red.iter().map(|&r| red[r]).collect()
    }

    /// Reduced inner product `Σ_r Q_r a_r b_r`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.weights)
            .map(|((x, y), w)| w * x * y)
            .sum()
    }

    /// Reduced values of a function evaluated at orbit representatives.
    pub fn sample<T: Real>(&self, grid: &VelocityGrid<T>, f: impl Fn(&[f64; 3]) -> f64) -> Vec<f64> {
        self.rep
            .iter()
            .map(|&i| {
                let v = grid.nodes[i];
                f(&[v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()])
            })
            .collect()
    }

    /// Representative velocity of a reduced index.
    pub fn node<T: Real>(&self, grid: &VelocityGrid<T>, r: usize) -> [f64; 3] {
        let v = grid.nodes[self.rep[r]];
        [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::VelocityScheme;

    #[test]
    fn orbit_counts() {
        for (n, expect) in [(10, 15), (12, 21), (16, 36)] {
            let g = VelocityGrid::<f64>::new(6.0, n, VelocityScheme::Uniform, 0.02).unwrap();
            let o = OrbitSpace::new(&g);
            assert_eq!(o.plane_len(), expect);
            assert_eq!(o.len(), n * expect);
            let total: f64 = o.weights.iter().sum();
            let full: f64 = g.weights.iter().sum();
            assert!((total - full).abs() < 1e-9 * full);
        }
    }

    #[test]
    fn reduce_expand_roundtrip_on_invariant_field() {
        let g = VelocityGrid::<f64>::new(6.0, 8, VelocityScheme::Uniform, 0.02).unwrap();
        let o = OrbitSpace::new(&g);
        let f = g.sample(|v| (v[0] + v[1] * v[1] + v[2] * v[2]).sin());
        let back = o.expand(&o.reduce(&g, &f));
        for (a, b) in f.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
        for (i, &j) in g.reflect.iter().enumerate() {
            assert_eq!(o.full_to_red[i], o.full_to_red[j]);
        }
    }
}
