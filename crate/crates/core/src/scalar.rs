//! Scalar abstraction so the whole pipeline runs in either f32 or f64.
//!
//! Training and on-disk formats use f32; verification suites (gradient
//! checks, PCA oracles) instantiate the same code with f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the core math is generic over (f32 or f64).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
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
    /// Lossy conversion from f64; the only way constants enter generic code.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion used by metrics and reports, which are always f64.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for `F::from_f64_lossy` at call sites full of constants.
#[inline]
pub fn real<F: Scalar>(v: f64) -> F {
    F::from_f64_lossy(v)
}
