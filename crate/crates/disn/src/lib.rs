//! Environment-disentangled speaker embedding training and evaluation.
//!
//! An auto-encoder splits a precomputed speaker embedding into a speaker
//! code and an environment code. Training combines reconstruction, speaker
//! classification (softmax + angular prototypical), an environment triplet
//! loss, an adversarial gradient-reversal loss, and a correlation
//! minimization penalty over triplet-structured batches. The crate also
//! ships a verification-metrics harness (EER, minDCF, linear probes) and a
//! synthetic factor-world generator with ground-truth factors for validating
//! disentanglement end to end.
//!
//! The numeric core is generic over the scalar type ([`Scalar`]): training
//! runs at `f32`, gradient verification at `f64`.

pub mod diffcore;
pub mod discriminators;
pub mod disentangler;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Concrete tensor aliases for the two supported precisions.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub use model::DisenModel;

/// Training-precision model (the checkpoint format stores f32 tensors).
pub type Model32 = DisenModel<f32>;
/// Verification-precision model, used by the gradient-check suite.
pub type Model64 = DisenModel<f64>;
