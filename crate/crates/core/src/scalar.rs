//! The floating-point scalar abstraction shared by the kernels and the
//! reference evaluator.
//!
//! Compiled programs always run in `f32`, matching the `Float32` element
//! kind. The reference evaluator can be instantiated at `f64` as well, which
//! is what the gradient checker uses to keep finite differences clean.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumCast};

pub trait Scalar:
    Float + NumCast + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
