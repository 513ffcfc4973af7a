use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic at byte {offset}: expected \"SGRD\"")]
    BadMagic { offset: usize },

    #[error("unsupported sgrid version {version} at byte {offset}")]
    UnsupportedVersion { offset: usize, version: u8 },

    #[error("unknown dtype code {code} at byte {offset}")]
    UnknownDtype { offset: usize, code: u8 },

    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("infeasible layout: {0}")]
    InfeasibleLayout(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("evaluation contains no valid pixels")]
    EmptyEvaluation,

    #[error("loss is not finite")]
    NonFiniteLoss,

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },

    #[error("insufficient data: need {needed} items, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("unknown ablation axis `{0}`")]
    UnknownAxis(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
