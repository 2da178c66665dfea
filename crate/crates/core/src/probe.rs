//! Off-grid velocity probes.
//!
//! A probe velocity `v` is advanced along its own characteristic with every
//! coupling term (the kernel, the invariant projections, the penalization
//! and `Γ`) evaluated from the converged grid solution by Nyström
//! extension. At a grid node the probe reproduces the grid column, so the
//! probes refine the velocity resolution near the grazing set `ξ₁+u = 0`
//! without changing the solution they interpolate.

use crate::collision::{kernel_row_at, nu_radial, GradConstants, ReducedOperator};
use crate::error::{invalid, LabError, Result};
use crate::field::Field;
use crate::gamma::{GammaEvaluator, GammaRow};
use crate::grids::{sqrt_maxwellian, VelocityGrid};
use crate::scalar::norm2;
use crate::transport::{nonlinear_source, transport_sweep, NonlinearSolution, PenalizedSystem, SweepScheme, GRAZING_TOL};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// `√M, ξ₁√M, |ξ|²√M`: the raw modes spanning the invariant directions
/// that matter on the D4-invariant subspace.
pub fn raw_modes(v: &[f64; 3]) -> [f64; 3] {
    let s = sqrt_maxwellian(v);
    [s, v[0] * s, norm2(v) * s]
}

/// Probe controls.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// Sweep integrator.
    pub scheme: SweepScheme,
    /// Sub-stations per main cell inside `[0, refine_below]` (1 = none).
    pub sub: usize,
    /// Extent of the refined zone.
    pub refine_below: f64,
    /// Decades of geometric stations (eight per decade) inserted into the
    /// first cell towards the wall.
    pub wall_decades: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            scheme: SweepScheme::Exponential,
            sub: 8,
            refine_below: 1.0,
            wall_decades: 3,
        }
    }
}

/// Probe result on the refined stations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSolution {
    /// Velocity.
    pub xi: [f64; 3],
    /// `ξ₁+u`.
    pub d: f64,
    /// Refined stations.
    pub x: Vec<f64>,
    /// `g(x, v)`.
    pub g: Vec<f64>,
    /// `f(x, v)`.
    pub f: Vec<f64>,
    /// `∂ₓf(x, v)` from the characteristic equation.
    pub dfdx: Vec<f64>,
    /// `φ_u(v)`.
    pub phi: f64,
    /// Fixed-point passes for the loss term of `Γ`.
    pub passes: usize,
}

/// Grid data shared by every probe of one solution.
pub struct ProbeContext<'a> {
    grid: &'a VelocityGrid<f64>,
    op: &'a ReducedOperator,
    sys: &'a PenalizedSystem,
    gamma: &'a GammaEvaluator,
    constants: GradConstants,
    boundary: Box<dyn Fn(&[f64; 3]) -> f64 + Sync + 'a>,
    h: Vec<f64>,
    gm: Vec<f64>,
    big_f: Field,
    perp_g: Field,
    e_g: Vec<[f64; 3]>,
    e_lg: Vec<[f64; 3]>,
    gamma_mom: Vec<[f64; 3]>,
    m_plus: Vec<f64>,
    m_psi: Vec<f64>,
    perp_phi: Vec<f64>,
    e_phi: [f64; 3],
    e_lphi: [f64; 3],
    coef_e: [[f64; 3]; 3],
    coef_xp: [f64; 3],
    coef_x0: [f64; 3],
}

impl std::fmt::Debug for ProbeContext<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProbeContext").field("stations", &self.sys.x.len()).finish()
    }
}

/// Coefficients `c` with `field ≈ Σ_l c_l raw_l` in the `Q` inner product.
fn raw_coefficients(op: &ReducedOperator, field: &[f64]) -> Result<[f64; 3]> {
    let raw: Vec<[f64; 3]> = op.nodes.iter().map(raw_modes).collect();
    let mut gram = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for i in 0..op.len() {
        for a in 0..3 {
            rhs[a] += op.q[i] * raw[i][a] * field[i];
            for b in 0..3 {
                gram[(a, b)] += op.q[i] * raw[i][a] * raw[i][b];
            }
        }
    }
    let c = gram
        .lu()
        .solve(&rhs)
        .ok_or(LabError::Singular("raw-mode Gram matrix"))?;
    Ok([c[0], c[1], c[2]])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'a> ProbeContext<'a> {
    /// Prepares the grid-side data of `sol`; `boundary` evaluates `f_b` at
    /// any velocity.
    pub fn new(
        grid: &'a VelocityGrid<f64>,
        op: &'a ReducedOperator,
        sys: &'a PenalizedSystem,
        gamma: &'a GammaEvaluator,
        sol: &NonlinearSolution,
        boundary: impl Fn(&[f64; 3]) -> f64 + Sync + 'a,
    ) -> Result<Self> {
        let proj = &sys.pen.proj;
        let n = op.len();
        let inv: Vec<Vec<f64>> = (0..3).map(|k| op.invariants.column(k).iter().copied().collect()).collect();
        let moments = |v: &[f64]| -> [f64; 3] { [op.inner(&inv[0], v), op.inner(&inv[1], v), op.inner(&inv[2], v)] };
        let g = &sol.g;
        let (_, gm) = nonlinear_source(sys, gamma, g, &sol.h)?;
        let mut big_f = g.clone();
        for j in 0..g.nx {
            for (v, p) in big_f.row_mut(j).iter_mut().zip(&proj.phi) {
                *v -= sol.h[j] * p;
            }
        }
        let rows: Vec<(Vec<f64>, [f64; 3], [f64; 3], [f64; 3])> = (0..g.nx)
            .into_par_iter()
            .map(|j| -> Result<_> {
                let perp = op.project_out_invariants(g.row(j));
                let lp = op.apply_l_raw(&perp);
                let fj = big_f.row(j);
                let defect = gamma.conservation_defect(fj, fj)?;
                Ok((perp, moments(g.row(j)), moments(&lp), defect))
            })
            .collect::<Result<_>>()?;
        let mut perp_rows = Vec::with_capacity(g.nx);
        let (mut e_g, mut e_lg, mut gamma_mom) = (Vec::new(), Vec::new(), Vec::new());
        for (p, a, b, c) in rows {
            perp_rows.push(p);
            e_g.push(a);
            e_lg.push(b);
            gamma_mom.push(c);
        }
        let perp_phi = op.project_out_invariants(&proj.phi);
        let e_lphi = moments(&op.apply_l_raw(&perp_phi));
        let mut coef_e = [[0.0; 3]; 3];
        for k in 0..3 {
            coef_e[k] = raw_coefficients(op, &inv[k])?;
        }
        debug_assert_eq!(perp_rows.first().map_or(n, Vec::len), n);
        Ok(Self {
            grid,
            op,
            sys,
            gamma,
            constants: op.constants,
            boundary: Box::new(boundary),
            h: sol.h.clone(),
            gm,
            m_plus: g.rows().map(|r| dot(&proj.flux_xp, r)).collect(),
            m_psi: g.rows().map(|r| dot(&proj.flux_psi, r)).collect(),
            big_f,
            perp_g: Field::from_rows(perp_rows)?,
            e_g,
            e_lg,
            gamma_mom,
            e_phi: moments(&proj.phi),
            e_lphi,
            perp_phi,
            coef_e,
            coef_xp: raw_coefficients(op, &proj.x_plus)?,
            coef_x0: raw_coefficients(op, &proj.x_zero)?,
        })
    }

    /// Discrete invariants `e_k(v)`.
    pub fn invariants_at(&self, v: &[f64; 3]) -> [f64; 3] {
        let r = raw_modes(v);
        [dot(&self.coef_e[0], &r), dot(&self.coef_e[1], &r), dot(&self.coef_e[2], &r)]
    }

    /// `X₊(v)`.
    pub fn x_plus_at(&self, v: &[f64; 3]) -> f64 {
        dot(&self.coef_xp, &raw_modes(v))
    }

    /// `X₀(v)`.
    pub fn x_zero_at(&self, v: &[f64; 3]) -> f64 {
        dot(&self.coef_x0, &raw_modes(v))
    }

    /// `φ_u(v)` from `𝓛φ_u = τ(ξ₁+u)φ_u` with the grid values on the right.
    pub fn phi_at(&self, v: &[f64; 3]) -> f64 {
        let kr = kernel_row_at(self.grid, &self.op.orbits, v, &self.constants);
        self.phi_with(v, &kr, nu_radial(norm2(v).sqrt()))
    }

    fn phi_with(&self, v: &[f64; 3], kr: &[f64], nu: f64) -> f64 {
        let e = self.invariants_at(v);
        let d = v[0] + self.sys.pen.u;
        let num = nu * dot(&e, &self.e_phi) + dot(kr, &self.perp_phi) + dot(&e, &self.e_lphi);
        num / (nu - self.sys.tau * d)
    }

    /// Main stations refined by `opts.sub` in `[0, opts.refine_below]`;
    /// returns the stations and, for each, `(cell, fraction)`.
    pub fn stations(&self, opts: &ProbeOptions) -> (Vec<f64>, Vec<(usize, f64)>) {
        let x = &self.sys.x;
        let mut out = vec![x[0]];
        let mut loc = vec![(0usize, 0.0)];
        for j in 0..x.len() - 1 {
            let m = if x[j + 1] <= opts.refine_below { opts.sub.max(1) } else { 1 };
            if j == 0 {
                let first = (x[1] - x[0]) / m as f64;
                for k in (1..=8 * opts.wall_decades).rev() {
                    let t = first * 10f64.powf(-(k as f64) / 8.0) / (x[1] - x[0]);
                    out.push(x[0] + t * (x[1] - x[0]));
                    loc.push((0, t));
                }
            }
            for k in 1..=m {
                let t = k as f64 / m as f64;
                out.push(if k == m { x[j + 1] } else { x[j] + t * (x[j + 1] - x[j]) });
                loc.push(if k == m { (j + 1, 0.0) } else { (j, t) });
            }
        }
        (out, loc)
    }

    fn interp(values: &[f64], loc: &[(usize, f64)]) -> Vec<f64> {
        loc.iter()
            .map(|&(j, t)| if t == 0.0 { values[j] } else { (1.0 - t) * values[j] + t * values[j + 1] })
            .collect()
    }

    /// Solves the characteristic of `v`. `key` seeds the `Γ` row (use the
    /// orbit index to reproduce a grid column).
    pub fn solve(&self, v: &[f64; 3], key: u64, opts: &ProbeOptions) -> Result<ProbeSolution> {
        let pen = &self.sys.pen;
        let (u, gamma) = (pen.u, pen.gamma);
        let d = v[0] + u;
        if d.abs() < GRAZING_TOL {
            return Err(LabError::Grazing(format!("probe at ξ₁+u = {d:e}")));
        }
        let nu = nu_radial(norm2(v).sqrt());
        let nubar = nu - gamma * d;
        if !(nubar > 0.0) {
            return Err(invalid("probe", "ν̄ ≤ 0"));
        }
        let kr = kernel_row_at(self.grid, &self.op.orbits, v, &self.constants);
        let e = self.invariants_at(v);
        let xp = self.x_plus_at(v);
        let phi = self.phi_with(v, &kr, nu);
        let row: GammaRow = self.gamma.probe_row(v, key);
        let x = &self.sys.x;
        let nx = x.len();
        let mut base = vec![0.0; nx];
        let mut loss = vec![0.0; nx];
        for j in 0..nx {
            let ex = (-gamma * x[j]).exp();
            let (gain, l) = row.split(self.big_f.row(j));
            loss[j] = ex * l;
            base[j] = nu * dot(&e, &self.e_g[j]) + dot(&kr, self.perp_g.row(j)) + dot(&e, &self.e_lg[j])
                - pen.alpha * xp * self.m_plus[j]
                + pen.beta * self.m_psi[j] * phi
                + ex * (gain - dot(&e, &self.gamma_mom[j]) + self.gm[j] * d * phi);
        }
        let (xs, loc) = self.stations(opts);
        let main_of: Vec<Option<usize>> = loc.iter().map(|&(j, t)| if t == 0.0 { Some(j) } else { None }).collect();
        let inflow = if d > 0.0 { (self.boundary)(v) + self.h[0] * phi } else { 0.0 };
        let mut g_main = vec![0.0; nx];
        let mut g_ref = Vec::new();
        let mut r_ref = Vec::new();
        let mut passes = 0;
        for pass in 1..=50 {
            passes = pass;
            let r_main: Vec<f64> = (0..nx).map(|j| base[j] - loss[j] * (g_main[j] - self.h[j] * phi)).collect();
            r_ref = Self::interp(&r_main, &loc);
            let src = Field {
                nx: xs.len(),
                nv: 1,
                data: r_ref.clone(),
            };
            g_ref = transport_sweep(&xs, &[d], &[nubar], &src, &[inflow], opts.scheme)?.data;
            let mut next = vec![0.0; nx];
            for (k, m) in main_of.iter().enumerate() {
                if let Some(j) = m {
                    next[*j] = g_ref[k];
                }
            }
            let change = next.iter().zip(&g_main).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = next.iter().fold(0.0f64, |m, a| m.max(a.abs()));
            g_main = next;
            if change <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let h_ref = Self::interp(&self.h, &loc);
        let gm_ref = Self::interp(&self.gm, &loc);
        let tau = self.sys.tau;
        let mut f = Vec::with_capacity(xs.len());
        let mut dfdx = Vec::with_capacity(xs.len());
        for k in 0..xs.len() {
            let ex = (-gamma * xs[k]).exp();
            let dg = (r_ref[k] - nubar * g_ref[k]) / d;
            let dh = (gamma - tau) * h_ref[k] + ex * gm_ref[k];
            let big = g_ref[k] - h_ref[k] * phi;
            f.push(ex * big);
            dfdx.push(ex * (dg - gamma * big - dh * phi));
        }
        Ok(ProbeSolution {
            xi: *v,
            d,
            x: xs,
            g: g_ref,
            f,
            dfdx,
            phi,
            passes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::Lab;
    use crate::transport::solve_nonlinear;
    use crate::LabConfig;

    fn small_lab() -> Lab {
        let mut cfg = LabConfig::default();
        cfg.vel_n = 8;
        cfg.space_length = Some(40.0);
        cfg.space_n = 80;
        cfg.eps = 1e-2;
        Lab::build(&cfg).unwrap()
    }

    #[test]
    fn probe_at_node_reproduces_grid_column() {
        let lab = small_lab();
        let gam = lab.gamma().unwrap();
        let sys = lab.system().unwrap();
        let fam = lab.family();
        let sol = solve_nonlinear(&sys, &gam, &fam.boundary([0.0, 0.0]), lab.picard(), None).unwrap();
        let eps = lab.cfg.eps;
        let ctx = ProbeContext::new(&lab.grid, &lab.op, &sys, &gam, &sol, move |v: &[f64; 3]| eps * (-norm2(v)).exp()).unwrap();
        let opts = ProbeOptions {
            scheme: SweepScheme::Box,
            sub: 1,
            refine_below: 0.0,
            wall_decades: 0,
        };
        let scale = sol.g.sup();
        for r in [0, 11, 45, lab.op.len() - 3] {
            let v = lab.op.nodes[r];
            assert!((ctx.phi_at(&v) - lab.proj.phi[r]).abs() < 1e-10, "φ at node {r}");
            assert!((ctx.x_plus_at(&v) - lab.proj.x_plus[r]).abs() < 1e-12);
            let p = ctx.solve(&v, r as u64, &opts).unwrap();
            let err = (0..sys.x.len()).fold(0.0f64, |m, j| m.max((p.g[j] - sol.g.row(j)[r]).abs()));
            assert!(err < 1e-10 * scale, "node {r}: {err:e} vs {scale:e}");
        }
    }
}
