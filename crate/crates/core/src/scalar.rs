//! Scalar abstraction shared by the model, the frozen replay and the probes.
//!
//! The model runs in `f32` by default; `f64` instantiations are used by the
//! finite-difference oracles and anywhere extra headroom is wanted.
//! Reductions always accumulate in `f64` regardless of the storage type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point storage type for weights and activations.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Name written into container manifests.
    const DTYPE: &'static str;

    fn of_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn cast<U: Scalar>(self) -> U {
        U::of_f64(self.as_f64())
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dot product accumulated in `f64`, in index order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.as_f64() * y.as_f64();
    }
    acc
}

/// Mean of squared entries, accumulated in `f64`.
#[inline]
pub fn mean_square<T: Scalar>(x: &[T]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    dot(x, x) / x.len() as f64
}

pub fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| x.cast()).collect()
}
