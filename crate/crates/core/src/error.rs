use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LslaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("softmax row {row} has every entry at -inf")]
    DegenerateRow { row: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LslaError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> LslaError {
    LslaError::Shape(msg.into())
}
