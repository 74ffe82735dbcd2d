use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("gradient root must be a scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),

    #[error("tape corrupted: node {node} references later node {input}")]
    TapeOrder { node: usize, input: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("checkpoint: bad magic or header ({0})")]
    CorruptHeader(String),

    #[error("checkpoint: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("invalid attack config: {0}")]
    InvalidAttack(String),

    #[error("target class {0} equals the true label")]
    TargetEqualsLabel(usize),

    #[error("invalid train config: {0}")]
    InvalidTrain(String),

    #[error("training diverged at step {step}: batch loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("zero vector in {0}")]
    ZeroVector(&'static str),

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("incompatible models: {0}")]
    IncompatibleModels(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
