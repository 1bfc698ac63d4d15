use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("image has {found} channel(s), expected {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("every anchor was skipped: no positive available for any anchor")]
    NoValidAnchors,
    #[error("identity multisets of the three streams differ")]
    IdentityMismatch,
    #[error("query identities absent from the gallery: {0:?}")]
    QueryIdentityAbsent(Vec<u32>),
    #[error("non-finite loss at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("image format: {0}")]
    ImageFormat(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
