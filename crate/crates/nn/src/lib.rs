//! Neural early-warning classifiers: a small reverse-mode autodiff engine,
//! the layers and model architectures built on it, and the training loop.

pub mod autodiff;
pub mod gradcheck;
pub mod neural;
pub mod tensor;
pub mod trainer;

use thiserror::Error;

pub use autodiff::{Tape, Var};
pub use neural::{Model, ModelKind, ModelSpec};
pub use tensor::Tensor;
pub use trainer::{predict, train, TrainConfig, TrainHistory, TrainOutcome};

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
