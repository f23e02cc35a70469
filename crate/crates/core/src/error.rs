use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index error in {op}: index {index} out of range for size {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },

    #[error("no classes supplied")]
    EmptyClasses,

    #[error("mask is empty: {0}")]
    EmptyMask(String),

    #[error("unknown parameter or group `{0}`")]
    UnknownName(String),

    #[error("incompatible snapshots: {0}")]
    IncompatibleSnapshot(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("class {class} has {available} training examples, {requested} shots requested")]
    Shots {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("contrastive loss needs at least two pairs per batch, got {0}")]
    ContrastiveDegenerate(usize),

    #[error("non-finite loss {value} at step {step}")]
    NonFinite { step: usize, value: f64 },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate {
            op,
            detail: detail.into(),
        }
    }
}
