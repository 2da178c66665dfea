//! Discrete-velocity laboratory for the steady nonlinear Boltzmann boundary
//! layer in a half space.

pub mod collision;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod io;
pub mod gamma;
pub mod grids;
pub mod kinetic_weight;
pub mod lab;
pub mod probe;
pub mod quadrature;
pub mod scalar;
pub mod spectral;
pub mod suite;
pub mod symmetry;
pub mod transport;

pub use config::LabConfig;
pub use error::{LabError, Result};
pub use scalar::Real;

/// Double-precision velocity grid.
pub type VelocityGrid64 = grids::VelocityGrid<f64>;
/// Single-precision velocity grid.
pub type VelocityGrid32 = grids::VelocityGrid<f32>;
/// Double-precision space grid.
pub type SpatialGrid64 = grids::SpatialGrid<f64>;
/// Single-precision space grid.
pub type SpatialGrid32 = grids::SpatialGrid<f32>;
