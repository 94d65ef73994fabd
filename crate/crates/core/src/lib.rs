//! Rich part-based encodings: part attention over a convolutional feature
//! grid, per-part prototype encoders, and the heads that consume them for
//! classification, domain adaptation, few-shot and generalized zero-shot
//! learning.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod model;
pub mod nn;
pub mod protocols;
pub mod report;
pub mod robustness;
pub mod scalar;
pub mod synth;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Task, TrainConfig};
pub use error::{Result, RpcError};
pub use model::{Architecture, ModelSpec, RpcModel};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type RpcModelF32 = model::RpcModel<f32>;
pub type RpcModelF64 = model::RpcModel<f64>;
pub type CheckpointF32 = checkpoint::Checkpoint<f32>;
pub type CheckpointF64 = checkpoint::Checkpoint<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
