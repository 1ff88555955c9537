//! Scalar abstraction: all numerics are generic over a real field type.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar for every computation in this crate.
///
/// `RealField` supplies field operations and elementary functions, the
/// num-traits bounds supply conversions to and from literal constants.
/// Implemented by `f32` and `f64`.
pub trait Scalar: RealField + FromPrimitive + ToPrimitive + Copy {}

impl<T: RealField + FromPrimitive + ToPrimitive + Copy> Scalar for T {}

/// Converts the working scalar into `f64` (diagnostics, serialization).
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal must convert into the scalar type")
}

/// Converts a `usize` (dimension, depth) into the working scalar type.
#[inline]
pub fn lit_usize<T: Scalar>(x: usize) -> T {
    T::from_usize(x).expect("usize must convert into the scalar type")
}

/// `s^(1 - 2/N)`, the velocity factor shared by the direction equations.
///
/// For `N = 2` the exponent is zero and the factor is exactly one, for any
/// `s` (IEEE `powf(s, 0) == 1`), which keeps two-layer dynamics polynomial.
#[inline]
pub fn pow_one_minus_2_over_n<T: Scalar>(s: T, n: usize) -> T {
    if n == 2 {
        T::one()
    } else {
        s.powf(T::one() - lit::<T>(2.0) / lit_usize::<T>(n))
    }
}
