//! Floating-point abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`], implemented for `f32` and
//! `f64`. Training runs at `f32`; finite-difference gradient verification
//! requires `f64`, where central differences are actually trustworthy.

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type the numeric core is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    /// Converts from `f64`, the type all configuration values use.
    fn of_f64(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 -> scalar conversion")
    }

    /// Widens to `f64` for reporting and loss bookkeeping.
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar -> f64 conversion")
    }

    fn of_usize(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).expect("usize -> scalar conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f32::of_f64(0.5), 0.5_f32);
        assert_eq!(f64::of_f64(0.5), 0.5_f64);
        assert_eq!(0.25_f32.as_f64(), 0.25_f64);
        assert_eq!(f64::of_usize(7), 7.0);
    }
}
