use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid attach indices: {0}")]
    InvalidAttach(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("fingerprint crafting failed for sample {sample} at step {step}: non-finite loss")]
    CraftingFailed { sample: usize, step: usize },
    #[error("missing benign calibration: {0}")]
    MissingCalibration(&'static str),
}
