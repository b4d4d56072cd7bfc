use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point element type of every matrix and factorization: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumCast + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal or tolerance into this type.
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        <Self as NumCast>::from(n).expect("count representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
