//! Universal semi-supervised semantic segmentation at desk scale.
//!
//! A shared convolutional encoder feeds one decoder per domain and an
//! embedding head. Unlabeled pixels are pulled toward fixed label
//! prototypes by minimizing the entropy of their similarity scores, both
//! against their own domain's labels and against the other domain's.

pub mod domain;
pub mod error;
pub mod gemm;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod prototypes;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor4;

/// Encoder output, `[batch, C_e, h / s, w / s]`.
pub type FeatureVolume = Tensor4;
/// Decoder output, `[batch, |labels|, h, w]`.
pub type LogitVolume = Tensor4;
/// Embedding head output, `[batch, d, h, w]`.
pub type EmbeddingVolume = Tensor4;
