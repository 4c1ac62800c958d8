use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid score table: {0}")]
    Scores(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    #[error("single-class input: {0}")]
    SingleClass(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("image error: {0}")]
    Image(String),

    #[error("embedding cache: {0}")]
    Cache(String),

    #[error("cache miss for {0} and no backend available")]
    CacheMiss(String),

    #[error("backend: {0}")]
    Backend(String),

    #[error("train/test overlap: {0} id(s) present in both sets")]
    Overlap(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 config/validation, 3 data, 4 backend/runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Overlap(_) => 2,
            Error::Backend(_) | Error::CacheMiss(_) => 4,
            _ => 3,
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
