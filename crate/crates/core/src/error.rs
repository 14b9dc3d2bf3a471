use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad parameters supplied by the caller.
    Usage,
    /// Malformed or incompatible input data.
    Data,
    /// Failure while running (I/O, divergence, evaluator failures).
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload length mismatch: header describes {expected} payload bytes, file holds {actual}")]
    PayloadLengthMismatch { expected: u64, actual: u64 },

    #[error("payload length mismatch for tensor `{name}`: shape {shape:?} needs {expected} bytes, offsets span {actual}")]
    TensorLengthMismatch {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        actual: u64,
    },

    #[error("unknown dtype `{dtype}` for tensor `{name}` (only F32 is supported)")]
    UnknownDtype { name: String, dtype: String },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("tensor `{name}` present in {present_in} checkpoint but missing from {missing_from}")]
    MissingTensor {
        name: String,
        present_in: &'static str,
        missing_from: &'static str,
    },

    #[error("tensor `{name}` has shape {left:?} in first checkpoint but {right:?} in second")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("base fingerprint mismatch: task vector `{task_id}` derives from {found:016x}, expected {expected:016x}")]
    FingerprintMismatch {
        task_id: String,
        expected: u64,
        found: u64,
    },

    #[error("duplicate task id `{0}`")]
    DuplicateTaskId(String),

    #[error("at least one task vector is required")]
    EmptyTaskList,

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("metadata error: {0}")]
    Metadata(String),

    #[error("normalized accuracy undefined: reference accuracy is zero")]
    UndefinedRatio,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("unknown merge method `{0}`")]
    UnknownMethod(String),

    #[error("evaluation failed for config [{config}]: {source}")]
    Evaluation {
        config: String,
        #[source]
        source: Box<Error>,
    },

    #[error("report serialization failed: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::UnknownMethod(_) => ErrorClass::Usage,
            Error::Io { .. }
            | Error::Divergence { .. }
            | Error::Report(_)
            | Error::UndefinedRatio => ErrorClass::Runtime,
            Error::Evaluation { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
