//! Error type shared across the pipeline.

use std::path::PathBuf;

/// Errors produced by dataset loading, run persistence and metric computation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A dataset line could not be decoded at all.
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    /// A ground-truth label is outside the closed vocabulary.
    #[error("line {line}: {field} value {value:?} is not in the vocabulary")]
    UnknownLabel {
        line: usize,
        field: &'static str,
        value: String,
    },

    /// Two records share an id.
    #[error("duplicate record id {id:?}")]
    DuplicateId { id: String },

    /// A configuration value violates its contract.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A run references a sample with no ground truth.
    #[error("no ground truth for sample {0:?}")]
    MissingTruth(String),

    /// An ensemble asked a run for a sample it never predicted.
    #[error("run {run:?} has no prediction for sample {sample:?}")]
    MissingSample { run: String, sample: String },

    /// Division guard for ratio metrics.
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    /// Numerical failure during training.
    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    /// I/O failure, carrying the path that caused it.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A persisted file failed to decode.
    #[error("{path}: invalid contents: {reason}")]
    InvalidFile { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid_file(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::InvalidFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
