use std::path::PathBuf;

use crate::tensor::Shape4;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape([usize; 4]),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("data length {got} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        shape: Shape4,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Shape4),

    #[error("batchnorm in training mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("kernel size {0} is too large to enumerate (at most 4)")]
    KernelTooLarge(usize),

    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        label: u8,
        classes: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },

    #[error("config: missing required key `{0}`")]
    MissingKey(String),

    #[error("config: unknown key `{0}`")]
    UnknownKey(String),

    #[error("config: key `{key}` {msg}")]
    BadValue { key: String, msg: String },

    #[error("training diverged: loss is {loss} at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("dataset does not fit the model: {0}")]
    DatasetMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
