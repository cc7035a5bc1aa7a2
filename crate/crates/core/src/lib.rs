//! Cross-spectral embedding adaptation at desk scale.
//!
//! The crate covers the full pipeline: a small tensor autodiff engine, a
//! hybrid convolution-transformer embedding backbone with partition-tagged
//! parameters, contrastive + self-distillation objectives, a deterministic
//! synthetic paired-modality benchmark, training loops, and a biometric
//! verification metric suite.

pub mod backbone;
pub mod objectives;
pub mod container;
pub mod tensor;

pub use tensor::{Graph, Tensor, TensorError, TensorId};
