//! Scalar abstraction shared by the numeric modules.
//!
//! Every estimator and bound formula is written once against [`Scalar`] and
//! instantiated for `f32` and `f64`. Random draws are always produced in
//! `f64` and then converted, so a seed yields the same stream for either
//! precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point type usable by the numeric core.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal or draw into this precision.
    #[inline]
    fn lit(x: f64) -> Self {
        // never fails for f32/f64: out-of-range values map to ±inf
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn from_usize_lossy(x: usize) -> Self {
        Self::lit(x as f64)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Squared Euclidean norm.
pub fn norm_sq<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Squared Euclidean distance between two vectors of equal length.
pub fn dist_sq<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Sample mean and standard error of the mean (`std / sqrt(len)`, with the
/// unbiased sample standard deviation). A single value has zero error.
pub fn mean_and_se<T: Scalar>(values: &[T]) -> (T, T) {
    if values.is_empty() {
        return (T::nan(), T::nan());
    }
    let len = T::from_usize_lossy(values.len());
    let mean = values.iter().copied().sum::<T>() / len;
    if values.len() == 1 {
        return (mean, T::zero());
    }
    let ss: T = values
        .iter()
        .map(|&v| {
            let d = v - mean;
            d * d
        })
        .sum();
    let var = ss / (len - T::one());
    (mean, (var / len).sqrt())
}
