use bivad_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("unsupported metric: {0}")]
    UnsupportedMetric(String),
}

impl Error {
    /// Machine-parseable error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Tensor(e) => e.code(),
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config-error",
            Error::Format(_) => "format-error",
            Error::Io(_) => "io-error",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::UnsupportedMetric(_) => "unsupported-metric",
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Format(other.to_string()),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
