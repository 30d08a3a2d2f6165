//! Multi-narrow single-model ensembles.
//!
//! A baseline CNN described as an [`ArchGraph`] is rewritten by
//! [`mn_transform`] into `r^2` narrow, independent paths whose logits are
//! averaged. The crate audits parameters, MACs and activations of any graph,
//! trains graphs with a small reverse-mode engine, and measures how the
//! trained paths relate to each other (CKA, dead channels, oracle accuracy,
//! cumulative ensemble curves).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type for common use.

pub mod arch;
pub mod audit;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod scalar;
pub mod trainer;
pub mod transform;

use thiserror::Error;

pub use arch::{
    build_depthwise_block, build_micro_cnn, build_resnet18, classify_layer, ArchGraph, LayerKind, LayerPosition,
    LayerSpec, PreservationClass,
};
pub use audit::{activation_footprint, conv_params, count_macs, count_params, preservation_report, AuditReport};
pub use engine::{backward, forward, Mode, ModelState, Tensor};
pub use scalar::{DType, Scalar};
pub use transform::{aggregate_outputs, mn_transform, path_count, TransformConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelState32 = ModelState<f32>;
pub type ModelState64 = ModelState<f64>;
pub type ForwardPass32 = engine::ForwardPass<f32>;
pub type ForwardPass64 = engine::ForwardPass<f64>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Arch(#[from] arch::ArchError),
    #[error(transparent)]
    Transform(#[from] transform::TransformError),
    #[error(transparent)]
    Audit(#[from] audit::AuditError),
    #[error(transparent)]
    Tensor(#[from] engine::TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Diagnostics(#[from] diagnostics::DiagError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
