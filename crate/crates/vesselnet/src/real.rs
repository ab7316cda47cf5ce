//! Floating-point abstraction: the whole pipeline runs in either `f32`
//! (training) or `f64` (oracle/gradient-check precision) through one code
//! path.

use num_traits::{Float, FromPrimitive, NumAssign};
use rustfft::FftNum;

/// Scalar type the numeric core is generic over.
pub trait Real:
    Float + FromPrimitive + NumAssign + FftNum + std::iter::Sum + std::fmt::Display + 'static
{
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Shorthand for lifting an `f64` literal into the generic scalar type.
#[inline]
pub fn r<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal must convert")
}
