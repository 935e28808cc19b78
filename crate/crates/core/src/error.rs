use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image of {height}x{width} is not divisible by patch size {patch_size}")]
    NonDivisibleSize {
        height: usize,
        width: usize,
        patch_size: usize,
    },

    #[error("mask ratio {ratio} over {n_patches} patches leaves no visible or no masked patch")]
    DegenerateRatio { ratio: f64, n_patches: usize },

    #[error("positional embedding dimension must be even, got {0}")]
    OddDim(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask plan selects no patches")]
    EmptyMask,

    #[error("loss term `{term}` is required by mode {mode} but was not provided")]
    MissingTermForMode { term: &'static str, mode: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("malformed record: {0}")]
    MalformedRecord(String),

    #[error("invalid value for `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("labels contain a single class; probing needs at least two")]
    SingleClassDegenerate,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::InvalidArgument(_)
                | Error::NonDivisibleSize { .. }
                | Error::DegenerateRatio { .. }
                | Error::OddDim(_)
                | Error::ConfigMismatch(_)
        )
    }
}
