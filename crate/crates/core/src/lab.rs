//! One-stop construction of every object a run needs from a [`LabConfig`].

use crate::collision::{GradConstants, ReducedOperator};
use crate::config::{EigenMethod, LabConfig, LinearMethod};
use crate::error::Result;
use crate::gamma::GammaEvaluator;
use crate::grids::{SpatialGrid, VelocityGrid};
use crate::spectral::{
    build_admissibility, compute_psi, solve_eigenpair, AdmissibilityData, EigenOptions, EigenSolution, Projections,
    PsiReport, ReducedBasis,
};
use crate::transport::{BoundaryFamily, PenalizedOperator, PenalizedSystem, PicardOptions, SweepScheme};

/// Grids, operators, the slow eigenpair and the admissibility data.
#[derive(Debug)]
pub struct Lab {
    /// Configuration.
    pub cfg: LabConfig,
    /// Velocity grid.
    pub grid: VelocityGrid<f64>,
    /// Folded linearized operator.
    pub op: ReducedOperator,
    /// `X₊, X₀, X₋` on the orbit space.
    pub basis: ReducedBasis,
    /// `(τ_u, φ_u, ψ_u)`.
    pub eigen: EigenSolution,
    /// `φ₀` extrapolation diagnostics.
    pub psi_report: PsiReport,
    /// Rank-one maps.
    pub proj: Projections,
    /// Moment matrix and admissibility functionals.
    pub adm: AdmissibilityData,
    /// Space grid.
    pub space: SpatialGrid<f64>,
}

impl Lab {
    /// Builds everything except `Γ` and the factored linear system.
    pub fn build(cfg: &LabConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = VelocityGrid::new(cfg.vel_radius, cfg.vel_n, cfg.vel_scheme, cfg.u)?;
        let op = ReducedOperator::assemble(&grid, GradConstants::from_mode(cfg.kernel_constants), true);
        let basis = ReducedBasis::new(&op);
        let opts = Self::eigen_options(cfg);
        let mut eigen = solve_eigenpair(&op, &basis, cfg.u, &opts)?;
        let psi_report = compute_psi(&op, &basis, &mut eigen, cfg.eigen_delta_u, &opts)?;
        let proj = Projections::new(&op, &basis, &eigen)?;
        let (alpha, beta) = Self::penalty_coefficients(cfg);
        let adm = build_admissibility(&op, &basis, &eigen, alpha, beta, cfg.gamma)?;
        let space = SpatialGrid::graded(cfg.length(), cfg.space_n, cfg.space_min_cell, cfg.space_grade)?;
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            op,
            basis,
            eigen,
            psi_report,
            proj,
            adm,
            space,
        })
    }

    /// `(α, β)`; only `α = β = 2γ` passes validation.
    pub fn penalty_coefficients(cfg: &LabConfig) -> (f64, f64) {
        (cfg.pen_alpha.unwrap_or(2.0 * cfg.gamma), cfg.pen_beta.unwrap_or(2.0 * cfg.gamma))
    }

    /// Eigen solver options implied by the configuration.
    pub fn eigen_options(cfg: &LabConfig) -> EigenOptions {
        let dense = match cfg.eigen_method {
            EigenMethod::Dense => true,
            EigenMethod::ShiftInvert => false,
            EigenMethod::Auto => cfg.vel_n <= 12,
        };
        EigenOptions {
            dense,
            u_min: cfg.eigen_u_min,
            ..EigenOptions::default()
        }
    }

    /// Assembles `Γ` on the orbit space.
    pub fn gamma(&self) -> Result<GammaEvaluator> {
        GammaEvaluator::assemble(&self.grid, &self.op, self.cfg.gamma_method, self.cfg.gamma_samples, self.cfg.gamma_seed)
    }

    /// Penalized operator.
    pub fn penalized(&self) -> Result<PenalizedOperator> {
        let (alpha, beta) = Self::penalty_coefficients(&self.cfg);
        PenalizedOperator::new(&self.op, self.proj.clone(), self.cfg.gamma, alpha, beta)
    }

    /// Penalized system on the configured space grid.
    pub fn system(&self) -> Result<PenalizedSystem> {
        self.system_on(self.space.nodes.clone())
    }

    /// Penalized system on explicit stations.
    pub fn system_on(&self, x: Vec<f64>) -> Result<PenalizedSystem> {
        let pen = self.penalized()?;
        match self.cfg.solver_method {
            LinearMethod::Direct => PenalizedSystem::direct(pen, x, self.eigen.tau),
            LinearMethod::Source => Ok(PenalizedSystem::source(
                pen,
                x,
                self.eigen.tau,
                SweepScheme::Exponential,
                self.cfg.tol_lin,
                self.cfg.max_iter,
                self.cfg.lambda_steps,
            )),
        }
    }

    /// Picard controls.
    pub fn picard(&self) -> PicardOptions {
        PicardOptions {
            tol: self.cfg.tol_nl,
            max_iter: self.cfg.max_picard,
        }
    }

    /// Boundary family with the configured `ε`.
    pub fn family(&self) -> BoundaryFamily {
        BoundaryFamily::new(&self.op, self.cfg.eps)
    }
}
