//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod checkpoint;
mod fdcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use fdcheck::{finite_difference_check, graph_gradient_check, relative_error, FdReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{AdamConfig, Parameter, ParameterStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced non-finite value {value} at flat index {index} (output shape {shape:?})")]
    NonFinite { op: &'static str, index: usize, value: f64, shape: Vec<usize> },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
