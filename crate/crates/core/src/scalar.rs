//! Floating-point scalar abstraction shared by the geometry, synthesis,
//! scanning and metrics code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// floating point: f32 or f64
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossless for f64, rounding for f32.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Wrap an angle into `[0, 2π)`.
#[inline]
pub fn wrap_angle<T: Scalar>(a: T) -> T {
    let two_pi = T::TAU();
    // atan2 output needs no division
    let w = if a >= -T::PI() && a < two_pi { a } else { a % two_pi };
    let w = if w < T::zero() { w + two_pi } else { w };
    // `a % 2π + 2π` can round up to exactly 2π for tiny negative inputs
    if w >= two_pi {
        T::zero()
    } else {
        w
    }
}

/// Signed shortest angular difference `a - b` in `(-π, π]`.
#[inline]
pub fn angle_diff<T: Scalar>(a: T, b: T) -> T {
    let d = wrap_angle(a - b);
    if d > T::PI() {
        d - T::TAU()
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_and_diff() {
        assert_eq!(wrap_angle(0.0_f64), 0.0);
        assert!((wrap_angle(-0.1_f64) - (std::f64::consts::TAU - 0.1)).abs() < 1e-15);
        assert!(wrap_angle(-1e-20_f64) < std::f64::consts::TAU);
        assert!((angle_diff(0.1_f64, 6.2) - (0.1 - 6.2 + std::f64::consts::TAU)).abs() < 1e-12);
        assert!((angle_diff(6.2_f32, 0.1) + (0.1 - 6.2 + std::f32::consts::TAU)).abs() < 1e-5);
    }
}
