//! Floating point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Real scalar type the tensor engine, losses and models are generic over.
///
/// Implemented for `f32` and `f64`; training and evaluation use `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lower bound applied to every logarithm argument.
    fn log_floor() -> Self;

    /// Lossless-or-rounding conversion from an `f64` constant.
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 constant representable")
    }

    fn to_f64_lossy(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn log_floor() -> Self {
        1e-12
    }
}

impl Scalar for f64 {
    fn log_floor() -> Self {
        1e-12
    }
}

/// `ln(max(x, 1e-12))`.
#[inline]
pub fn clamped_ln<T: Scalar>(x: T) -> T {
    x.max(T::log_floor()).ln()
}
