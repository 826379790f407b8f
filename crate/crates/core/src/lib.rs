//! Co-stack residual affinity networks (CSRAN) for text sequence matching.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a define-by-run reverse-mode autodiff graph,
//! * [`layers`]: embeddings, the character word encoder, highway, dense and BiLSTM layers,
//! * [`cafe`]: alignment + factorization-machine feature blocks and the
//!   multi-level attention refinement (MAR) stacked encoder,
//! * [`csra`]: co-stack residual affinity, bidirectional alignment, matching,
//!   aggregation and pooling,
//! * [`model`]: the assembled network, loss, prediction and checkpoints,
//! * [`data`]: corpus readers, vocabularies, batching, embeddings and synthetic tasks,
//! * [`train`]: Adam, the training loop and evaluation metrics.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two concrete instantiations.

pub mod cafe;
pub mod csra;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Model32 = model::CsranModel<f32>;
pub type Model64 = model::CsranModel<f64>;
