use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("vocabulary error: phoneme index {index} outside inventory of {size}")]
    Vocabulary { index: usize, size: usize },
    #[error("registry error: {0}")]
    Registry(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("invalid f0 statistics: {0}")]
    Stats(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("malformed record in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
