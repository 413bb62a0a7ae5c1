//! Scalar abstraction: all core math is written once over `Scalar` and
//! instantiated at `f32` (training) or `f64` (oracle tests).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short name recorded in run metadata.
    const NAME: &'static str;

    /// Construct from an `f64` literal or intermediate.
    fn real(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 convertible to scalar")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar convertible to f64")
    }

    fn from_count(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).expect("usize convertible to scalar")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}
