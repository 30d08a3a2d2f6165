//! Minimal dense-tensor compute layer with reverse-mode differentiation over a layer graph.

use thiserror::Error;

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod ops;
mod tensor;

pub use model::{backward, forward, ForwardPass, InitOptions, Mode, ModelState, Moments, Param};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("layer `{layer}`: {msg}")]
    Layer { layer: String, msg: String },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("backward called without a retained forward trace")]
    NoTrace,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
