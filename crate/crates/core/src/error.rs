use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate ({i}, {j}, {k}) out of bounds for grid {x}x{y}x{z}")]
    Bounds {
        i: usize,
        j: usize,
        k: usize,
        x: usize,
        y: usize,
        z: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("field kind mismatch: expected {expected}, got {actual}")]
    Kind {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("format error in {file}: {msg}")]
    Format { file: String, msg: String },

    #[error("{file}: expected {expected} bytes, found {actual}")]
    Length {
        file: String,
        expected: usize,
        actual: usize,
    },

    #[error("raw label {0} has no entry in the label map")]
    UnmappedLabel(u16),

    #[error("class {0} has no inverse label mapping")]
    UnmappedClass(u16),

    #[error("invalid state: {0}")]
    State(&'static str),

    #[error("non-finite value in loss term `{term}`{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { term: &'static str, step: Option<usize> },

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("{}: {source}", path.display())]
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

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Config-class errors map to exit code 2, data errors to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Kind { .. } | Error::Version(_) => 2,
            Error::Format { .. }
            | Error::Length { .. }
            | Error::UnmappedLabel(_)
            | Error::UnmappedClass(_)
            | Error::Io { .. } => 3,
            Error::Bounds { .. } | Error::State(_) | Error::NonFinite { .. } => 1,
        }
    }
}
