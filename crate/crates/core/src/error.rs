use std::path::PathBuf;

/// Errors produced by the salienteye pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("cannot decode image {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("unknown layer `{name}`; available layers: {}", available.join(", "))]
    UnknownLayer { name: String, available: Vec<String> },

    #[error("malformed artifact {}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
}

/// Coarse error classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad or unreadable input data.
    Input,
    /// Not enough data to run the requested operation.
    Insufficient,
    /// Backbone, head or profile could not be loaded or used together.
    Model,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::Manifest { .. } | Error::Invalid(_) | Error::Decode { .. } => ErrorKind::Input,
            Error::Insufficient(_) => ErrorKind::Insufficient,
            Error::DimMismatch(_) | Error::Model(_) | Error::UnknownLayer { .. } | Error::Artifact { .. } => {
                ErrorKind::Model
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
