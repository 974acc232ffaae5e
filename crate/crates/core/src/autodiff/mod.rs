//! Dense `f64` tensors, a reverse-mode tape, Adam and checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, Manifest, ManifestEntry, MANIFEST_FILE};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_FLOOR};
pub use optim::{adam_step, Adam, AdamConfig};
pub use params::{fan_in_uniform, uniform, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, NodeId, Tape, LAYER_NORM_EPS};
pub(crate) use tape::softplus;
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
