//! Error type shared by every module of the laboratory.

use thiserror::Error;

/// Failures raised by grid construction, operator assembly, solvers and
/// diagnostics. Each variant carries enough context to act on.
#[derive(Debug, Error)]
pub enum LabError {
    /// A precondition on an input parameter is violated.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Configuration file or key could not be parsed.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two vectors or matrices do not have compatible sizes.
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// A velocity node sits on (or numerically at) the grazing set.
    #[error("grazing-set hazard: {0}")]
    Grazing(String),

    /// An iterative procedure ran out of iterations.
    #[error("{what} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    /// An iteration blew up.
    #[error("{what} diverged: {detail}")]
    Divergence { what: &'static str, detail: String },

    /// A dense or banded factorization met a zero pivot.
    #[error("singular system in {0}")]
    Singular(&'static str),

    /// Eigenvalue selection could not be made unambiguously.
    #[error("eigen branch problem: {0}")]
    Eigen(String),

    /// A tolerance check inside a constructor failed.
    #[error("tolerance breach: {0}")]
    Tolerance(String),

    /// Diagnostics could not be evaluated on the given data.
    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    /// File-system failure while reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Serialization failure while writing JSON artifacts.
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> LabError {
    LabError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
