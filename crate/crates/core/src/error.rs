use thiserror::Error;

use crate::events::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// The bytes on disk do not follow the declared file format.
    #[error("format error: {0}")]
    Format(String),

    #[error("validation failed: {0}")]
    Validation(ValidationReport),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Shapes or widths of cooperating objects disagree (e.g. parameter input
    /// width vs. encoded feature width).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
