//! Scalar abstraction shared by the tensor, encoder and training code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type the numeric core is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal, which is always representable.
    fn lit(x: f64) -> Self;

    fn of_f32(x: f32) -> Self;

    fn to_f32_lossy(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn of_f32(x: f32) -> Self {
        x
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn of_f32(x: f32) -> Self {
        x as f64
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}
