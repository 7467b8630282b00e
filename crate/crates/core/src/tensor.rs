//! Scalar trait and array aliases shared by every module.
//!
//! All images, priors and feature maps are rank-4 arrays laid out as
//! `(batch, channels, height, width)` in standard (row-major) order.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array4, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Rank-4 `(batch, channels, height, width)` array.
pub type ImageArray<T> = Array4<T>;

/// Floating-point element type usable by the engine (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the float type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts between float widths element-wise.
pub fn cast<A: Real, B: Real>(a: &Array4<A>) -> Array4<B> {
    a.mapv(|v| B::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(B::nan))
}
