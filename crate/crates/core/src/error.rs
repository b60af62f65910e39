use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A layer, model or run configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// A value became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: image error: {message}")]
    Image { path: PathBuf, message: String },

    /// A checkpoint could not be decoded; `field` names the offending part.
    #[error("checkpoint field `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            message: message.into(),
        }
    }
}
