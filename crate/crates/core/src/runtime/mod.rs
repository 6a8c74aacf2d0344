//! Dense tensors, reverse-mode autodiff, parameter storage, Adam, and the
//! checkpoint file format.

mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use graph::{ConvGeom, Gradients, Graph, ParamId, Var};
pub use optim::{cosine_lr, AdamConfig, OptimizerState};
pub use params::ParamStore;
pub use tensor::{ShapeDisplay, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: String, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0} of an empty operand")]
    Empty(&'static str),
    #[error("backward needs a scalar loss, got shape {0}")]
    NonScalarLoss(String),
    #[error("non-finite gradient for parameter `{0}`; optimizer step skipped")]
    NonFiniteGradient(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
