//! Scalar abstraction for the floating-point routines.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numeric modules are generic over.
///
/// Implemented for `f32` and `f64`; the blanket impl picks up any type with
/// the required `num-traits` capabilities.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + AddAssign + Debug + Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Sum
        + AddAssign
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}
