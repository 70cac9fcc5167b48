use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors and the tape.
///
/// Model training runs in `f32`; the finite-difference gradient checks
/// instantiate the same code with `f64` so the step size can stay small
/// without drowning in rounding noise.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + rustfft::FftNum
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    fn from_f(x: f64) -> Self;
    fn to_f(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f(self) -> f64 {
        self
    }
}
