use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("input too short: need at least {required} samples, got {actual}")]
    TooShort { required: usize, actual: usize },

    #[error("cannot parse key {text:?}: unrecognised token {token:?}")]
    KeyParse { text: String, token: String },

    #[error("track {0:?} appears in more than one split")]
    TrackLeakage(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("optimizer step requested before gradients were populated")]
    MissingGradients,

    #[error("linear system is singular; use a nonzero ridge strength")]
    Singular,

    #[error(
        "pretraining diverged at step {step}; last good checkpoint is from step {last_good_step}"
    )]
    Diverged {
        step: usize,
        last_good_step: usize,
        last_good: Box<crate::contrastive::PretrainRun>,
    },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("malformed data in {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 1 usage error, 2 data error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::Singular => 3,
            Error::Shape { .. } | Error::TapeConsumed | Error::MissingGradients => 3,
            _ => 2,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
