use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input text is empty or whitespace only")]
    EmptyInput,

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u16, expected: u16 },

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    #[error("checkpoint is truncated: expected {expected} payload bytes, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },

    #[error("non-finite loss at batch example {index}")]
    NonFiniteLoss { index: usize },

    #[error("vocabulary hash mismatch: bias model {bias}, current {current}")]
    VocabMismatch { bias: String, current: String },

    #[error("feedback could not be parsed: {0}")]
    UnparseableFeedback(String),

    #[error("external parser failed: {0}")]
    ExternalParser(String),

    #[error("unknown {kind} strategy {name:?}")]
    UnknownStrategy { kind: &'static str, name: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
