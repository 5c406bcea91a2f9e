//! Scalar abstraction for the numeric core.
//!
//! All floating-point math in this crate is generic over [`Scalar`] so the
//! same code runs in `f32` or `f64`. Configuration values are plain `f64`
//! and enter the generic layer through [`Scalar::from_f64`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable as tensor element type.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from the `f64` configuration layer.
    fn from_f64(v: f64) -> Self;

    /// Widening conversion for reporting and serialization.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
