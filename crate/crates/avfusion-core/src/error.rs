use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how a caller should treat them: input problems
/// (`Shape`, `Domain`, `Format`, `Validation`, `Usage`) versus failures that
/// happen while otherwise-valid work is running (`NonFinite`, `Diverged`,
/// `Io`). The CLI maps the first group to exit code 1 and the second to 2.
#[derive(Debug, Error)]
pub enum AvError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AvError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AvError::Io { path: path.into(), source }
    }

    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            AvError::Shape(_)
            | AvError::Domain(_)
            | AvError::Format(_)
            | AvError::Validation(_)
            | AvError::Usage(_) => 1,
            AvError::NonFinite(_) | AvError::Diverged(_) | AvError::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, AvError>;
