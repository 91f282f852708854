use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("zero denominator in landmark channel {channel}: {detail}")]
    ZeroDenominator { channel: usize, detail: String },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("landmark names do not match: {0}")]
    NameMismatch(String),

    #[error("{path}: expected {expected} bytes, found {actual}")]
    ByteCount { path: PathBuf, expected: u64, actual: u64 },

    #[error("{path}: missing required key `{key}`")]
    MissingKey { path: PathBuf, key: String },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u64 },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
