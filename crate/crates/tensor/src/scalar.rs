//! Scalar element types for tensors.
//!
//! Training and inference run on `f32`; gradient checking runs the same code
//! on `f64`. Everything numeric is written against this trait so the two
//! precisions share one implementation.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of a [`crate::Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Converts an `f64` constant into this scalar type.
    fn from_f64_c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("constant not representable")
    }

    /// Converts a `usize` count (e.g. a divisor) into this scalar type.
    fn from_usize_c(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("count not representable")
    }

    /// Widens to `f64` for schedules, logging and metrics.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }

    /// Narrows to `f32` for checkpoint serialization.
    fn to_f32_c(self) -> f32 {
        self.to_f32().expect("scalar not representable as f32")
    }

    /// Reads an `f32` checkpoint value into this scalar type.
    fn from_f32_c(v: f32) -> Self {
        <Self as FromPrimitive>::from_f32(v).expect("f32 not representable")
    }

    /// Raw bits used for exact (bitwise) comparisons in freeze contracts.
    fn to_bits_u64(self) -> u64;
}

impl Scalar for f32 {
    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}
