use std::error::Error;
use std::fmt;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Errors raised by tensor construction, tape operations and tensor files.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Shape has more than four axes or a zero extent.
    InvalidShape { shape: Vec<usize> },
    /// Flat data length disagrees with the product of the extents.
    DataLength { expected: usize, got: usize },
    /// Two operands of `op` cannot be combined.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Batch normalization in train mode saw fewer than two values per channel.
    DegenerateBatch { per_channel: usize },
    /// A class index was outside `[0, classes)`.
    LabelOutOfRange { label: usize, classes: usize },
    /// Label vector length disagrees with the number of rows.
    LabelCount { expected: usize, got: usize },
    /// Parameter and gradient lists have different lengths.
    ParamCount { expected: usize, got: usize },
    /// `backward` was called on a non-scalar root.
    NotScalar { shape: Vec<usize> },
    /// An operation produced NaN or infinity.
    NonFinite { op: &'static str },
    /// A variable id does not belong to this tape.
    UnknownVar { id: usize },
    /// Linear system with a (numerically) singular matrix.
    Singular,
    /// Malformed tensor file.
    Format { offset: usize, message: String },
    /// I/O failure while reading or writing `path`.
    Io { path: String, message: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::InvalidShape { shape } => write!(f, "invalid tensor shape {shape:?}"),
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape volume {expected}")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::DegenerateBatch { per_channel } => write!(
                f,
                "batch_norm: train mode needs at least 2 values per channel, got {per_channel}"
            ),
            TensorError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            TensorError::LabelCount { expected, got } => {
                write!(f, "expected {expected} labels, got {got}")
            }
            TensorError::ParamCount { expected, got } => {
                write!(f, "expected {expected} parameters, got {got}")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward root must be scalar, got shape {shape:?}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            TensorError::UnknownVar { id } => write!(f, "variable {id} is not on this tape"),
            TensorError::Singular => write!(f, "singular linear system"),
            TensorError::Format { offset, message } => {
                write!(f, "tensor file format error at byte {offset}: {message}")
            }
            TensorError::Io { path, message } => write!(f, "{path}: {message}"),
        }
    }
}

impl Error for TensorError {}
