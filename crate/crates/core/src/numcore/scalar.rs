use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating scalar the numeric substrate is generic over.
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
}

impl<T> Scalar for T where
    T: Float
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
}

/// Converts an `f64` constant into the scalar type. Panics only if the target
/// type cannot represent finite `f64` values at all.
#[inline]
pub fn fromf64<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("scalar type must represent f64 constants")
}

#[inline]
pub fn tof64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("scalar type must convert to f64")
}
