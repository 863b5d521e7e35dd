//! Scalar abstraction: core math is generic over the floating-point type.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distributions::uniform::SampleUniform;

/// Floating-point scalar usable throughout the numeric core.
///
/// Implemented for `f32` and `f64`; training typically runs at `f32`,
/// gradient checks at `f64`.
pub trait Scalar:
    Float
    + ScalarOperand
    + LinalgScalar
    + FromPrimitive
    + ToPrimitive
    + SampleUniform
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for config values.
    fn from_f64_c(v: f64) -> Self {
        Self::from(v).expect("f64 conversion")
    }
    /// Lossy conversion to `f64`, used for reporting.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
    /// Dtype code stored in slice/tensor file headers.
    const DTYPE_CODE: u8;
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 1;
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 2;
}
