use thiserror::Error;

/// Errors raised anywhere in the quantile-sheet pipeline.
#[derive(Debug, Error)]
pub enum SheetError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} lies outside the domain [{lo}, {hi}]")]
    DomainViolation { value: f64, lo: f64, hi: f64 },

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input in {path}: {message}")]
    Parse { path: String, message: String },
}

impl SheetError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SheetError::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        SheetError::NumericFailure(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, SheetError>;
