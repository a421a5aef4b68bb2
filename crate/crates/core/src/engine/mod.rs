//! Trainable MPTCN: stacked causal temporal convolutions interleaved with
//! message passing, with hand-written backpropagation.

pub mod activation;
pub mod config;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;

use thiserror::Error;

use crate::linalg::SpectralNormError;
use crate::spatial::GraphError;
use crate::temporal::TopologyError;

pub use activation::Activation;
pub use config::{MessagePassing, ModelConfig, TemporalKind};
pub use model::{ForwardMode, ForwardPass, LayerKind, Model};
pub use optim::{adam_step, AdamHyper, AdamState};
pub use params::{ModelParams, TensorBundle, Weights};
pub use train::{evaluate_mse, train, Batch, Dataset, TrainHistory, TrainSchedule};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("forward cache missing; run a forward pass first")]
    MissingCache,
    #[error("gradient contains NaN")]
    NanGradient,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    SpectralNorm(#[from] SpectralNormError),
}
