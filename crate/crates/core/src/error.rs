use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point: non-finite coordinate")]
    InvalidPoint,

    #[error("inversion failed: residual {residual:.3e} after {iterations} iterations")]
    InversionFailed { residual: f64, iterations: usize },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: [usize; 3], found: [usize; 3] },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("decomposition requires analytic error model")]
    NotAnalytic,

    #[error("backend failed on sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code: 1 config error, 2 numeric failure, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::NotAnalytic | Error::ShapeMismatch { .. } => 1,
            Error::InvalidPoint | Error::InversionFailed { .. } | Error::CheckFailed(_) => 2,
            Error::Io(_) | Error::Format(_) | Error::Json(_) => 3,
            Error::Sample { source, .. } => source.exit_code(),
        }
    }
}
