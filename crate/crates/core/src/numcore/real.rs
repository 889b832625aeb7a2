use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type usable by tensors, convolutions and the task network.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// Nearest representable value.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
