use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("matrix is not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("cutoff must lie in (0, 1], got {0}")]
    BadCutoff(f64),
    #[error("model has not been trained")]
    ModelUntrained,
    #[error("routing violation: {0}")]
    RoutingViolation(String),
    #[error("prompt is missing the {0} marker")]
    MarkerMissing(&'static str),
    #[error("malformed markers: {0}")]
    MalformedMarkers(String),
    #[error("empty set: {0}")]
    EmptySet(&'static str),
    #[error("similarity undefined for a zero feature vector")]
    ZeroFeature,
    #[error("grid incomplete: {0}")]
    GridIncomplete(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("host mismatch: adapter expects backbone {expected}, got {actual}")]
    HostMismatch { expected: String, actual: String },
    #[error("bad image file: {0}")]
    BadImage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line tool: 1 usage/config,
    /// 2 data or corruption, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid(_)
            | Error::MarkerMissing(_)
            | Error::MalformedMarkers(_)
            | Error::BadCutoff(_)
            | Error::OutOfRange(_)
            | Error::Json(_) => 1,
            Error::NotOrthonormal(_) | Error::Numerical(_) | Error::DegenerateInput(_) => 3,
            _ => 2,
        }
    }
}
