//! Scalar abstraction for the numeric core.
//!
//! Everything gradient-bearing is generic over [`Scalar`] so the same code
//! runs in f32 or f64. The crate-root aliases pin f64, which is what the
//! instrumentation uses: G-effect dot products difference-amplify rounding
//! error, so single precision is only for quick forward-only experiments.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

/// Shorthand for pulling an f64 constant into the scalar type.
#[inline]
pub fn s<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("constant representable in scalar type")
}
