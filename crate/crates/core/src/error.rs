use std::error::Error;
use std::fmt;

use afa_tensor::TensorError;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug)]
pub enum CoreError {
    Tensor(TensorError),
    /// Invalid encoder, head or dataset configuration.
    Config(String),
    /// An episode could not be drawn from the requested pool.
    Episode(String),
    /// CSV parse failure at a 1-based data row.
    Csv { row: usize, message: String },
    Io { path: String, message: String },
    Json { path: String, message: String },
    /// A training loss became NaN or infinite.
    NonFiniteLoss { iteration: usize, message: String },
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        CoreError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Tensor(e) => write!(f, "{e}"),
            CoreError::Config(m) => write!(f, "configuration error: {m}"),
            CoreError::Episode(m) => write!(f, "episode sampling error: {m}"),
            CoreError::Csv { row, message } => write!(f, "csv row {row}: {message}"),
            CoreError::Io { path, message } => write!(f, "{path}: {message}"),
            CoreError::Json { path, message } => write!(f, "{path}: invalid JSON: {message}"),
            CoreError::NonFiniteLoss { iteration, message } => {
                write!(f, "non-finite loss at iteration {iteration}: {message}")
            }
        }
    }
}

impl Error for CoreError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            CoreError::Tensor(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for CoreError {
    fn from(e: TensorError) -> Self {
        CoreError::Tensor(e)
    }
}
