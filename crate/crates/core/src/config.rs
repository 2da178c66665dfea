//! Flat `key = value` configuration with validation and a content hash.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are an
//! error so that typos never silently fall back to defaults.

use crate::error::{invalid, LabError, Result};
use crate::grids::VelocityScheme;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

/// Which Grad constants the kernel uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelConstants {
    /// Hard-sphere values `C₁ = 1/√(2π)`, `C₂ = 4/√(2π)` with the true sign
    /// structure `k = k₂ − k₁`, so that the collision invariants span Ker 𝓛.
    Physical,
    /// Both constants equal to one, `k = k₁ + k₂`; a model kernel that does
    /// not annihilate the collision invariants.
    Normalized,
}

/// Assembly rule for the bilinear collision form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMethod {
    /// Product quadrature for `N ≤ 10`, Monte Carlo beyond.
    Auto,
    /// Product quadrature over grid partners and a fixed hemisphere rule.
    Product,
    /// Fixed-seed Monte Carlo over partner velocity and direction.
    MonteCarlo,
}

/// Linear penalized solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearMethod {
    /// Sparse LU on the fully coupled discrete system.
    Direct,
    /// Source iteration over transport sweeps, λ-continuation on failure.
    Source,
}

/// Eigen solver for the slow pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigenMethod {
    /// Dense for small reduced problems, shift-invert otherwise.
    Auto,
    /// Full symmetric eigendecomposition.
    Dense,
    /// Inverse iteration on a shifted pencil targeting `τ ≈ 0`.
    ShiftInvert,
}

/// Every tunable of the laboratory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    /// `vel.radius`: velocity truncation `V`.
    pub vel_radius: f64,
    /// `vel.n`: nodes per velocity axis (even).
    pub vel_n: usize,
    /// `vel.scheme`: `uniform` or `gauss`.
    pub vel_scheme: VelocityScheme,
    /// `space.L`: domain length; `None` means `30/γ₀`.
    pub space_length: Option<f64>,
    /// `space.n`: number of cells.
    pub space_n: usize,
    /// `space.grade`: geometric ratio toward `x = 0`.
    pub space_grade: f64,
    /// `space.min_cell`: first cell width.
    pub space_min_cell: f64,
    /// `phys.u`: drift.
    pub u: f64,
    /// `weight.theta`: `θ`.
    pub theta: f64,
    /// `weight.theta_tilde`: `θ̃`; `None` means `θ/8`.
    pub theta_tilde: Option<f64>,
    /// `pen.gamma`: penalization rate `γ`.
    pub gamma: f64,
    /// `pen.gamma0`: reporting rate `γ₀`; `None` means `γ/2`.
    pub gamma0: Option<f64>,
    /// `pen.alpha`: coefficient of the `Π₊` penalization; `None` means `2γ`.
    pub pen_alpha: Option<f64>,
    /// `pen.beta`: coefficient of the `p_u` penalization; `None` means `2γ`.
    pub pen_beta: Option<f64>,
    /// `solver.method`.
    pub solver_method: LinearMethod,
    /// `solver.tol_lin`.
    pub tol_lin: f64,
    /// `solver.tol_nl`.
    pub tol_nl: f64,
    /// `solver.max_iter`: source-iteration cap.
    pub max_iter: usize,
    /// `solver.max_picard`: outer nonlinear cap.
    pub max_picard: usize,
    /// `solver.lambda_steps`: continuation steps on source-iteration failure.
    pub lambda_steps: usize,
    /// `kernel.constants`.
    pub kernel_constants: KernelConstants,
    /// `gamma.method`.
    pub gamma_method: GammaMethod,
    /// `gamma.samples`: Monte Carlo samples per node.
    pub gamma_samples: usize,
    /// `gamma.seed`.
    pub gamma_seed: u64,
    /// `bc.eps`: boundary amplitude `ε`.
    pub eps: f64,
    /// `tune.tol`: admissibility residual target.
    pub tune_tol: f64,
    /// `tune.max_iter`.
    pub tune_max_iter: usize,
    /// `eigen.method`.
    pub eigen_method: EigenMethod,
    /// `eigen.u_min`: start of the continuation.
    pub eigen_u_min: f64,
    /// `eigen.delta_u`: offset for the φ₀ extrapolation.
    pub eigen_delta_u: f64,
    /// `duhamel.t`: horizon; `None` means `40/ν₀`.
    pub duhamel_t: Option<f64>,
    /// `nln.c`: Gaussian rate in the singular-integral kernels.
    pub nln_c: f64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            vel_radius: 6.0,
            vel_n: 12,
            vel_scheme: VelocityScheme::Uniform,
            space_length: None,
            space_n: 400,
            space_grade: 1.15,
            space_min_cell: 1e-4,
            u: 0.02,
            theta: 0.1,
            theta_tilde: None,
            gamma: 0.02,
            gamma0: None,
            pen_alpha: None,
            pen_beta: None,
            solver_method: LinearMethod::Direct,
            tol_lin: 1e-10,
            tol_nl: 1e-11,
            max_iter: 4000,
            max_picard: 60,
            lambda_steps: 4,
            kernel_constants: KernelConstants::Physical,
            gamma_method: GammaMethod::Auto,
            gamma_samples: 1024,
            gamma_seed: 20_231_017,
            eps: 1e-3,
            tune_tol: 1e-10,
            tune_max_iter: 12,
            eigen_method: EigenMethod::Auto,
            eigen_u_min: 1e-3,
            eigen_delta_u: 1e-3,
            duhamel_t: None,
            nln_c: 1.0 / 16.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| LabError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

impl LabConfig {
    /// Parses `key = value` text on top of the defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                LabError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a file.
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "vel.radius" => self.vel_radius = parse_num(key, v)?,
            "vel.n" => self.vel_n = parse_num(key, v)?,
            "vel.scheme" => self.vel_scheme = v.parse()?,
            "space.L" => self.space_length = parse_opt_f64(key, v)?,
            "space.n" => self.space_n = parse_num(key, v)?,
            "space.grade" => self.space_grade = parse_num(key, v)?,
            "space.min_cell" => self.space_min_cell = parse_num(key, v)?,
            "phys.u" => self.u = parse_num(key, v)?,
            "weight.theta" => self.theta = parse_num(key, v)?,
            "weight.theta_tilde" => self.theta_tilde = parse_opt_f64(key, v)?,
            "pen.gamma" => self.gamma = parse_num(key, v)?,
            "pen.gamma0" => self.gamma0 = parse_opt_f64(key, v)?,
            "pen.alpha" => self.pen_alpha = parse_opt_f64(key, v)?,
            "pen.beta" => self.pen_beta = parse_opt_f64(key, v)?,
            "solver.method" => {
                self.solver_method = match v {
                    "direct" => LinearMethod::Direct,
                    "source" => LinearMethod::Source,
                    _ => return Err(LabError::Config(format!("`{key}`: unknown `{v}`"))),
                }
            }
            "solver.tol_lin" => self.tol_lin = parse_num(key, v)?,
            "solver.tol_nl" => self.tol_nl = parse_num(key, v)?,
            "solver.max_iter" => self.max_iter = parse_num(key, v)?,
            "solver.max_picard" => self.max_picard = parse_num(key, v)?,
            "solver.lambda_steps" => self.lambda_steps = parse_num(key, v)?,
            "kernel.constants" => {
                self.kernel_constants = match v {
                    "physical" => KernelConstants::Physical,
                    "normalized" => KernelConstants::Normalized,
                    _ => return Err(LabError::Config(format!("`{key}`: unknown `{v}`"))),
                }
            }
            "gamma.method" => {
                self.gamma_method = match v {
                    "auto" => GammaMethod::Auto,
                    "product" => GammaMethod::Product,
                    "montecarlo" => GammaMethod::MonteCarlo,
                    _ => return Err(LabError::Config(format!("`{key}`: unknown `{v}`"))),
                }
            }
            "gamma.samples" => self.gamma_samples = parse_num(key, v)?,
            "gamma.seed" => self.gamma_seed = parse_num(key, v)?,
            "bc.eps" => self.eps = parse_num(key, v)?,
            "tune.tol" => self.tune_tol = parse_num(key, v)?,
            "tune.max_iter" => self.tune_max_iter = parse_num(key, v)?,
            "eigen.method" => {
                self.eigen_method = match v {
                    "auto" => EigenMethod::Auto,
                    "dense" => EigenMethod::Dense,
                    "shift-invert" => EigenMethod::ShiftInvert,
                    _ => return Err(LabError::Config(format!("`{key}`: unknown `{v}`"))),
                }
            }
            "eigen.u_min" => self.eigen_u_min = parse_num(key, v)?,
            "eigen.delta_u" => self.eigen_delta_u = parse_num(key, v)?,
            "duhamel.t" => self.duhamel_t = parse_opt_f64(key, v)?,
            "nln.c" => self.nln_c = parse_num(key, v)?,
            other => return Err(LabError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Checks cross-parameter constraints.
    pub fn validate(&self) -> Result<()> {
        if !(self.vel_radius > 0.0) {
            return Err(invalid("vel.radius", "must be positive"));
        }
        if self.vel_n < 4 {
            return Err(invalid("vel.n", "must be at least 4"));
        }
        if self.vel_n % 2 == 1 {
            return Err(LabError::Grazing(format!(
                "vel.n = {} is odd: the axis would carry ξ₁ = 0 next to the grazing set ξ₁ + u = 0",
                self.vel_n
            )));
        }
        if !(self.theta >= 0.0 && self.theta < 0.25) {
            return Err(invalid("weight.theta", format!("θ = {} violates θ < 1/4", self.theta)));
        }
        let tt = self.theta_tilde();
        if !(tt > 0.0 && tt <= self.theta / 8.0 * (1.0 + 1e-12)) {
            return Err(invalid("weight.theta_tilde", "need 0 < θ̃ ≤ θ/8"));
        }
        if !(self.u.abs() > 0.0 && self.u.abs() <= 0.05) {
            return Err(invalid("phys.u", "need 0 < |u| ≤ 0.05"));
        }
        if !(self.gamma > 0.0 && self.gamma < 0.25) {
            return Err(invalid("pen.gamma", "need 0 < γ ≪ 1"));
        }
        let g0 = self.gamma0();
        if !(g0 > 0.0 && g0 < self.gamma) {
            return Err(invalid("pen.gamma0", "need 0 < γ₀ < γ"));
        }
        for (name, v) in [("pen.alpha", self.pen_alpha), ("pen.beta", self.pen_beta)] {
            if let Some(v) = v {
                if (v - 2.0 * self.gamma).abs() > 1e-15 * self.gamma {
                    return Err(invalid(
                        name,
                        "only the shipped choice α = β = 2γ is supported by the solver",
                    ));
                }
            }
        }
        if !(self.eps >= 0.0) {
            return Err(invalid("bc.eps", "must be nonnegative"));
        }
        if self.space_n < 2 {
            return Err(invalid("space.n", "must be at least 2"));
        }
        if !(self.eigen_u_min > 0.0 && self.eigen_delta_u > 0.0) {
            return Err(invalid("eigen", "u_min and delta_u must be positive"));
        }
        if self.gamma_samples == 0 {
            return Err(invalid("gamma.samples", "must be positive"));
        }
        Ok(())
    }

    /// `θ̃`, defaulting to `θ/8`.
    pub fn theta_tilde(&self) -> f64 {
        self.theta_tilde.unwrap_or(self.theta / 8.0)
    }

    /// `γ₀`, defaulting to `γ/2`.
    pub fn gamma0(&self) -> f64 {
        self.gamma0.unwrap_or(self.gamma / 2.0)
    }

    /// Domain length, defaulting to `30/γ₀`.
    pub fn length(&self) -> f64 {
        self.space_length.unwrap_or(30.0 / self.gamma0())
    }

    /// Canonical `key = value` rendering (sorted keys, resolved defaults).
    pub fn canonical(&self) -> String {
        let o = |v: Option<f64>| v.map_or_else(|| "auto".to_string(), |x| format!("{x:e}"));
        let mut m = BTreeMap::new();
        m.insert("vel.radius", format!("{:e}", self.vel_radius));
        m.insert("vel.n", self.vel_n.to_string());
        m.insert("vel.scheme", self.vel_scheme.to_string());
        m.insert("space.L", o(self.space_length));
        m.insert("space.n", self.space_n.to_string());
        m.insert("space.grade", format!("{:e}", self.space_grade));
        m.insert("space.min_cell", format!("{:e}", self.space_min_cell));
        m.insert("phys.u", format!("{:e}", self.u));
        m.insert("weight.theta", format!("{:e}", self.theta));
        m.insert("weight.theta_tilde", o(self.theta_tilde));
        m.insert("pen.gamma", format!("{:e}", self.gamma));
        m.insert("pen.gamma0", o(self.gamma0));
        m.insert("pen.alpha", o(self.pen_alpha));
        m.insert("pen.beta", o(self.pen_beta));
        m.insert("solver.method", format!("{:?}", self.solver_method).to_lowercase());
        m.insert("solver.tol_lin", format!("{:e}", self.tol_lin));
        m.insert("solver.tol_nl", format!("{:e}", self.tol_nl));
        m.insert("solver.max_iter", self.max_iter.to_string());
        m.insert("solver.max_picard", self.max_picard.to_string());
        m.insert("solver.lambda_steps", self.lambda_steps.to_string());
        m.insert("kernel.constants", format!("{:?}", self.kernel_constants).to_lowercase());
        m.insert("gamma.method", format!("{:?}", self.gamma_method).to_lowercase());
        m.insert("gamma.samples", self.gamma_samples.to_string());
        m.insert("gamma.seed", self.gamma_seed.to_string());
        m.insert("bc.eps", format!("{:e}", self.eps));
        m.insert("tune.tol", format!("{:e}", self.tune_tol));
        m.insert("tune.max_iter", self.tune_max_iter.to_string());
        m.insert("eigen.method", format!("{:?}", self.eigen_method).to_lowercase());
        m.insert("eigen.u_min", format!("{:e}", self.eigen_u_min));
        m.insert("eigen.delta_u", format!("{:e}", self.eigen_delta_u));
        m.insert("duhamel.t", o(self.duhamel_t));
        m.insert("nln.c", format!("{:e}", self.nln_c));
        m.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        content_hash(self.canonical().as_bytes())
    }

    /// Hash of the keys that determine the assembled collision operator.
    pub fn operator_hash(&self) -> String {
        let key = format!(
            "radius={:e};n={};scheme={};u={:e};constants={:?}",
            self.vel_radius, self.vel_n, self.vel_scheme, self.u, self.kernel_constants
        );
        content_hash(key.as_bytes())
    }
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = LabConfig::default();
        cfg.validate().unwrap();
        let again = LabConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(LabConfig::parse("weight.theta = 0.3").is_err());
        assert!(matches!(
            LabConfig::parse("vel.n = 11"),
            Err(LabError::Grazing(_))
        ));
        assert!(LabConfig::parse("nonsense = 1").is_err());
        assert!(LabConfig::parse("pen.alpha = 0.5").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = LabConfig::parse("# comment\nvel.n = 10  # inline\nspace.L = 100\n").unwrap();
        assert_eq!(cfg.vel_n, 10);
        assert_eq!(cfg.length(), 100.0);
        assert_ne!(cfg.hash(), LabConfig::default().hash());
    }
}
