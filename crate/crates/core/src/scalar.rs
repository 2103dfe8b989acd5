//! Scalar abstraction shared by every numerical routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point type the library is written against (`f32` or `f64`).
pub trait Real:
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
    + 'static
{
    /// Converts an `f64` literal; panics only if the value is not representable at all.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("integer not representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Machine epsilon scaled for relative tolerances that must work in both precisions.
    fn eps() -> Self {
        Self::epsilon()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Complex amplitude over a real scalar.
pub type Cx<T> = Complex<T>;

#[inline]
pub(crate) fn cx<T: Real>(re: T, im: T) -> Cx<T> {
    Complex::new(re, im)
}

#[inline]
pub(crate) fn cis<T: Real>(phase: T) -> Cx<T> {
    Complex::new(phase.cos(), phase.sin())
}

#[inline]
pub(crate) fn real<T: Real>(x: T) -> Cx<T> {
    Complex::new(x, T::zero())
}

/// Multiplication by `-i`.
#[inline]
pub(crate) fn mul_neg_i<T: Real>(z: Cx<T>) -> Cx<T> {
    Complex::new(z.im, -z.re)
}

/// Multiplication by `i`.
#[inline]
pub(crate) fn mul_i<T: Real>(z: Cx<T>) -> Cx<T> {
    Complex::new(-z.im, z.re)
}

/// Numerically stable `sech`.
pub fn sech<T: Real>(x: T) -> T {
    let e = (-x.abs()).exp();
    let two = T::lit(2.0);
    two * e / (T::one() + e * e)
}

/// Logistic `1/(1+e^x)`, stable for large `|x|`.
pub fn logistic_neg<T: Real>(x: T) -> T {
    if x > T::zero() {
        let e = (-x).exp();
        e / (T::one() + e)
    } else {
        T::one() / (T::one() + x.exp())
    }
}
