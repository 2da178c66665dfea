//! Scalar abstraction for the generic numerical kernels.
//!
//! Grids, weights, closed-form kernels, the kinetic weight and the 1-D
//! quadrature routines are written against [`Real`], so they run in either
//! `f32` or `f64`. The assembled operators and solvers are `f64` only; see the
//! aliases in the crate root.

use std::fmt::{Debug, Display};

/// Floating-point scalar usable by the generic kernels: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Copy
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("f64 literal fits the scalar type")
    }

    /// Converts a `usize` into this scalar type.
    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        <Self as num_traits::FromPrimitive>::from_usize(n).expect("usize fits the scalar type")
    }

    /// Widens the value to `f64`.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Squared Euclidean norm of a 3-vector.
#[inline]
pub fn norm2<T: Real>(v: &[T; 3]) -> T {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

/// Euclidean distance between two 3-vectors.
#[inline]
pub fn dist<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    norm2(&d).sqrt()
}
