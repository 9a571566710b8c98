use thiserror::Error;

/// Errors raised by the EIT pipeline.
///
/// `Invalid` marks bad input (exit code 1 in the CLI); `Numerical` marks a
/// failure inside an otherwise valid computation (exit code 2).
#[derive(Debug, Error)]
pub enum EitError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl EitError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        EitError::Invalid(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        EitError::Numerical(msg.into())
    }

    /// True for errors caused by the caller's input rather than the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, EitError::Invalid(_) | EitError::Parse(_) | EitError::Io(_))
    }
}

impl From<serde_json::Error> for EitError {
    fn from(e: serde_json::Error) -> Self {
        EitError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, EitError>;
