use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the whole pipeline is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + rustfft::FftNum
    + 'static
{
    /// Type code written into binary dumps and checkpoints.
    const DTYPE_CODE: u32;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE_CODE: u32 = 1;
}

impl Scalar for f64 {
    const DTYPE_CODE: u32 = 2;
}

/// Converts a `usize` count into the scalar type.
pub(crate) fn count<T: Scalar>(n: usize) -> T {
    T::of(n as f64)
}
