use thiserror::Error;

/// Crate-wide error type. Precondition violations are reported with enough
/// context to name the offending shapes or values.
#[derive(Debug, Error)]
pub enum PgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("dataset format error at {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, PgError>;

impl PgError {
    pub fn shape(msg: impl Into<String>) -> Self {
        PgError::ShapeMismatch(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        PgError::InvalidArg(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PgError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        PgError::Format { path: path.into(), reason: reason.into() }
    }
}
