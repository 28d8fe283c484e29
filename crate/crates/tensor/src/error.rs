use thiserror::Error;

/// Failure modes shared by every tensor operation.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TensorError {
    /// Stable short code, used as a machine-parseable prefix by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            TensorError::InvalidArgument(_) => "invalid-argument",
            TensorError::Numeric(_) => "numeric-error",
            TensorError::State(_) => "state-error",
            TensorError::Format(_) => "format-error",
            TensorError::Io(_) => "io-error",
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::TensorError::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
