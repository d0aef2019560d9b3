use std::path::PathBuf;

use crate::model::Checkpoint;

/// Errors produced anywhere in the core library.
#[derive(Debug, thiserror::Error)]
pub enum LdamError {
    #[error("shape mismatch in {kind}: {detail}")]
    Shape { kind: &'static str, detail: String },

    #[error("layer cache does not match this call: {0}")]
    StaleCache(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("IDX parse error at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint tensor `{name}`: {reason}")]
    CheckpointTensor { name: String, reason: String },

    #[error("invalid neuron reference: {0}")]
    InvalidNeuron(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<Checkpoint>,
    },

    #[error("sampler produced a non-finite value at step {step}: {what}")]
    NonFiniteStep {
        step: u64,
        what: String,
        frame: Box<crate::frame::FrameMessage>,
    },

    #[error("no post-burn-in samples are available yet")]
    NoSamples,

    #[error("dataset file not found: {0}")]
    MissingData(PathBuf),

    #[error("image encoding failed: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LdamError> = std::result::Result<T, E>;

pub(crate) fn shape_err(kind: &'static str, detail: impl Into<String>) -> LdamError {
    LdamError::Shape {
        kind,
        detail: detail.into(),
    }
}
