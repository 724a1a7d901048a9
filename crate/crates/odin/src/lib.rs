//! Coupled object discovery and representation learning on synthetic scenes.
//!
//! A small convolutional feature extractor is trained with a mask-pooled
//! contrastive objective. The masks come from k-means clustering of the
//! feature maps of a slowly-updated copy of the same network, so segmentation
//! quality and representation quality improve together. The learned features
//! are scored with unsupervised segmentation metrics (IoU / best overlap /
//! object recovery) and by propagating first-frame labels through short
//! videos.
//!
//! The numeric kernels are generic over the scalar type via [`Scalar`];
//! the training pipeline and the CLI use the `f64` aliases exported below.

pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod discovery;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objective;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense array of the default (double) precision used by the pipeline.
pub type Tensor = tensor::TensorOf<f64>;
/// Single-precision counterpart; the kernels accept it but the trainer,
/// checkpoints and CLI are pinned to `f64`.
pub type Tensor32 = tensor::TensorOf<f32>;
/// Autodiff graph at pipeline precision.
pub type Graph = autodiff::GraphOf<f64>;

/// Model parameters at pipeline precision.
pub type ModelParams = model::ModelParamsOf<f64>;
