use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type for the numeric core: `f32` or `f64`.
///
/// The training pipeline instantiates everything at `f64` (see the crate-root
/// aliases); `f32` is available for callers that want it.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + 'static
{
    /// Lossy conversion from `f64`, for constants and tolerances.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to scalar")
    }

    /// Widening conversion to `f64`, for reports and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
