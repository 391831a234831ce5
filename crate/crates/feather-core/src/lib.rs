//! Sequence-to-sequence alignment and sparse decoding engine.
//!
//! The crate provides the pieces of a small text-to-spectrogram model
//! built around monotonic Gaussian attention and a block-sparse
//! autoregressive decoder: a reverse-mode tape for training, plain
//! kernels for inference, magnitude pruning with a gradual schedule,
//! toy data generation, robustness metrics, and timing harnesses.
//!
//! Everything is generic over the working precision ([`Scalar`], f32 or
//! f64) and deterministic: fixed seeds give bit-identical runs.

pub mod attention;
pub mod bundle;
pub mod data;
pub mod error;
pub mod model;
pub mod robustness;
pub mod scalar;
pub mod sparsity;
pub mod tape;
pub mod tensor;
pub mod timing;

pub use error::{FeatherError, Result};
pub use scalar::{Precision, Scalar};
pub use tape::{Gradients, Tape, ValueId};
pub use tensor::Tensor;
