//! Small reverse-mode neural network engine: layer stack, softmax
//! cross-entropy, Adam and finite-difference gradient checks.

mod checkpoint;
mod gradcheck;
mod layers;
mod lstm;
mod network;
mod optim;
mod spec;
mod tensor;

pub use checkpoint::{blocks_checksum, Checkpoint, ParamBlock, CHECKPOINT_MAGIC};
pub use gradcheck::{gradient_check, BlockError, GradCheckReport, MAX_CHECKED_PARAMS};
pub use layers::{softmax_rows, Mode, Param};
pub use network::{cross_entropy, Network};
pub use optim::Adam;
pub use spec::{LayerSpec, NetworkSpec};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: {message}")]
    Spec { layer: usize, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("gradient check over {0} parameters exceeds the enumeration limit")]
    TooManyParams(usize),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
