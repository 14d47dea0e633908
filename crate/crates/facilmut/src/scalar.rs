use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numeric pipeline (datasets, training, fitness,
/// statistics inputs) is generic over. Implemented for `f32` and `f64`;
/// `crate::Real` fixes the default precision used by the CLI harness.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy-in, exact-out conversion from `f64` literals. Panics only if the
    /// implementing type cannot represent any f64 at all, which neither
    /// supported type does.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }

    /// Widening conversion used by report serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar conversion to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
