use std::path::PathBuf;

use maskmatch_core::pairs::PairError;
use maskmatch_core::metrics::MetricError;
use maskmatch_core::scoring::ScoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint {path}: checksum mismatch (manifest {expected}, data {actual})")]
    Checksum { path: PathBuf, expected: String, actual: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error(transparent)]
    Metrics(#[from] MetricError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

impl ModelError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ModelError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
