//! Dense and sparse linear algebra, the split GCN layer, loss, and optimizers.

pub mod checkpoint;
pub(crate) mod dense;
pub mod layer;
mod loss;
mod model;
pub mod network;
mod norm;
mod optim;
mod sparse;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use dense::{stacked_distance, stacked_norm, Dense};
pub use layer::{layer_backward, layer_forward, Activation};
pub use loss::{cross_entropy, micro_f1};
pub use model::GcnModel;
pub use norm::{normalize_rows, normalize_rows_backward};
pub use optim::{OptimState, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use network::{ForwardTrace, Gradients, LocalView};
pub use sparse::Csr;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("shape mismatch in {op}: expected {expected}, got {got}")]
pub struct ShapeError {
    pub op: &'static str,
    pub expected: String,
    pub got: String,
}

impl ShapeError {
    pub fn new(op: &'static str, expected: String, got: String) -> Self {
        Self { op, expected, got }
    }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("loss mask selects no nodes")]
    EmptyMask,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid model: {0}")]
    Model(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
