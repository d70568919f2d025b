//! Desk-scale vision-language transformer encoders.
//!
//! The crate builds one-tower and two-tower VL encoders from a small
//! tape-based autodiff tensor library, pretrains them with masked language
//! modeling and image-text matching on deterministic synthetic data,
//! supports per-module freezing with optimizer-state elision, and
//! fine-tunes on five downstream task shapes.
//!
//! All numeric code is generic over the scalar type ([`Scalar`]): `f32`
//! is the working precision, `f64` exists for finite-difference gradient
//! checks. Concrete aliases are exported at the crate root.

pub mod data;
pub mod engine;
pub mod error;
pub mod layers;
pub mod models;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, IdMatrix, KeyMask, Tape, Tensor};

/// Working-precision tensor used for training.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used for gradient checking.
pub type Tensor64 = Tensor<f64>;
