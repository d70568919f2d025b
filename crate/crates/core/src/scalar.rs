//! Scalar abstraction over the element types tensors may hold.
//!
//! Everything numeric in this crate is generic over [`Scalar`]. Training
//! runs on `f32`; `f64` exists for gradient checking, where central
//! finite differences need the extra mantissa bits.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; used for literals and hyperparameters.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().expect("Scalar converts to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
