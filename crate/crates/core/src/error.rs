use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegenError {
    #[error("io error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("failed to encode image {path}: {message}")]
    Encode { path: PathBuf, message: String },

    #[error("invalid json in {path}: {message}")]
    Json { path: PathBuf, message: String },

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("duplicate record id {id:?} at record {index}")]
    DuplicateId { id: String, index: usize },

    #[error("record {index}: referenced file {path} does not exist")]
    MissingFile { index: usize, path: PathBuf },

    #[error("record {index}: unknown split tag {tag:?}")]
    UnknownSplit { index: usize, tag: String },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("no ids in common between the source and enhanced sets")]
    EmptyIntersection,

    #[error("dimension mismatch for {id}: {left:?} vs {right:?}")]
    DimensionMismatch {
        id: String,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration at {field}: {message}")]
    Config { field: String, message: String },

    #[error("unknown feature extractor {0:?}")]
    UnknownExtractor(String),

    #[error("non-finite loss at iteration {iteration}: {component}")]
    NonFiniteLoss { iteration: usize, component: String },

    #[error("matrix square root failed after {retries} jitter retries")]
    MatrixSqrt { retries: usize },

    #[error("duplicate method name {0:?}")]
    DuplicateMethod(String),

    #[error("onnx runtime error: {0}")]
    Runtime(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("out of memory: needs about {needed_bytes} bytes, {available_bytes} available")]
    OutOfMemory { needed_bytes: u64, available_bytes: u64 },
}

pub type Result<T, E = RegenError> = std::result::Result<T, E>;

impl RegenError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RegenError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        RegenError::InvalidArgument(message.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        RegenError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
