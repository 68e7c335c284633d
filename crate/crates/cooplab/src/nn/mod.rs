//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors are immutable f64 buffers. Each tensor remembers the op and
//! inputs that produced it, so [`backward`] can replay the graph in
//! reverse topological order and accumulate gradients. Every op checks
//! its output for NaN/Inf and fails loudly instead of training on
//! garbage.

mod backward;
mod checkpoint;
pub mod gradcheck;
mod optim;
mod tensor;

pub use backward::{backward, GradStore};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CheckpointRole};
pub use optim::{adamw_step, cosine_lr, kaiming_uniform, AdamConfig, Bindings, ParamId, ParamSet, Parameter};
pub use tensor::{Op, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite output of {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("optimizer state mismatch: {0}")]
    Optimizer(String),
    #[error("learning-rate schedule: step {step} out of range 0..={total}")]
    Schedule { step: u64, total: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
