use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Element type the engine can differentiate over.
///
/// `f32` is the working dtype for training; `f64` exists so that
/// finite-difference gradient checks can run at full precision.
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
