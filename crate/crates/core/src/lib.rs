//! Structured pruning of small convolutional networks: ADMM-regularized
//! filter/column pruning followed by network purification and unused path
//! removal, with the tensor, data and reporting machinery around it.

pub mod admm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod purify;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{build_lenet5, build_tiny_resnet, LayerGraph, LayerKind};
pub use model::{model_forward, Batch, LossValue};
pub use tensor::Tensor;
