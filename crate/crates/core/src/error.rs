use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum RpcError {
    /// Input or output shapes disagree, or an operation precondition is violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value encountered in {0}")]
    Numeric(String),

    #[error("missing dataset artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("unknown dataset `{name}`; expected one of: {known}")]
    UnknownDataset { name: String, known: String },

    #[error("ingestion error in {}: {msg}", .path.display())]
    Ingest { path: PathBuf, msg: String },

    #[error("cannot sample episode: class `{class}` has {available} images, need {needed}")]
    Sampling {
        class: String,
        available: usize,
        needed: usize,
    },

    /// Training produced a non-finite loss; the model keeps its last finite state.
    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("attack error: {0}")]
    Attack(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = RpcError> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> RpcError {
    RpcError::Contract(msg.into())
}
