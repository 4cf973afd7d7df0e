use std::fmt;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Errors emitted by tensor construction, ops, and the gradient tape.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Shape product does not match the data length.
    DataLength { expected: usize, got: usize },
    /// A tensor may not have zero elements.
    EmptyShape { shape: Shape4 },
    /// Two operands have incompatible shapes.
    ShapeMismatch { op: &'static str, left: Shape4, right: Shape4 },
    /// An op's precondition on a single shape failed.
    BadShape { op: &'static str, shape: Shape4, detail: String },
    /// An op produced or received a NaN/Inf value.
    NonFinite { op: &'static str },
    /// An op needs more elements than the input has.
    TooFewElements { op: &'static str, needed: usize, got: usize },
    /// Scalar argument out of the op's domain.
    BadScalar { op: &'static str, detail: String },
    /// Inputs of one op are recorded on different tapes.
    TapeMismatch { op: &'static str },
    /// backward() was called with a tensor that is not on the tape.
    NotOnTape,
    /// backward() requires a single-element loss tensor.
    LossNotScalar { shape: Shape4 },
    /// Text dump could not be parsed.
    ParseDump { detail: String },
}

type Shape4 = [usize; 4];

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::EmptyShape { shape } => {
                write!(f, "tensor shape {shape:?} has zero elements")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            TensorError::BadShape { op, shape, detail } => {
                write!(f, "{op}: bad shape {shape:?}: {detail}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value produced"),
            TensorError::TooFewElements { op, needed, got } => {
                write!(f, "{op}: needs at least {needed} elements, got {got}")
            }
            TensorError::BadScalar { op, detail } => write!(f, "{op}: {detail}"),
            TensorError::TapeMismatch { op } => {
                write!(f, "{op}: inputs are recorded on different tapes")
            }
            TensorError::NotOnTape => write!(f, "tensor is not recorded on this tape"),
            TensorError::LossNotScalar { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            TensorError::ParseDump { detail } => write!(f, "tensor dump parse error: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}
