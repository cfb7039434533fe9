use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: loss does not depend on any tensor that requires grad")]
    DetachedLoss,

    #[error("backward: graph already consumed for this loss; run the forward pass again")]
    BackwardTwice,

    #[error("missing gradient for parameter {0}")]
    MissingGradient(usize),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} out of range: {value} (allowed {allowed})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        allowed: String,
    },

    #[error("dataset error ({path}): {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("condensed file format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("missing checkpoint at outer loop {0}")]
    MissingCheckpoint(usize),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

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
}
