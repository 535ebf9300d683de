use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: malformed record: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("referential integrity: {0}")]
    Integrity(String),
    #[error("invalid data: {0}")]
    Validation(String),
    #[error("synthetic generation failed: {0}")]
    Generation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite values after transformer layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite loss {loss} at step {step} ({task})")]
    NonFiniteLoss { step: usize, task: String, loss: f64 },
    #[error("embedding error: {0}")]
    Embedding(String),
    #[error("attention maps were not retained for this forward pass")]
    AttentionNotRetained,
    #[error("invalid index: {0}")]
    Index(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
