use std::fmt;

use plq_imaging::ImagingError;
use plq_tensor::TensorError;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug)]
pub enum CoreError {
    Tensor(TensorError),
    Imaging(ImagingError),
    Io(std::io::Error),
    Json(serde_json::Error),
    /// Quantizer parameters violate their invariants.
    BadQuantParams { detail: String },
    /// Quantized forward hit a layer whose parameters were never calibrated.
    UninitializedQuant { layer: String },
    /// Operation requires quantizer attachments but the model has none.
    NoAttachments,
    /// Model file is corrupt, has the wrong magic, or an unsupported version.
    ModelFormat { detail: String },
    /// Model and dataset scales disagree, or shapes are inconsistent.
    ScaleMismatch { detail: String },
    /// Calibration/finetuning input validation failed.
    Validation { detail: String },
    /// A loss turned non-finite; carries diagnostics for the failing step.
    NonFiniteLoss { detail: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Tensor(e) => write!(f, "tensor: {e}"),
            CoreError::Imaging(e) => write!(f, "imaging: {e}"),
            CoreError::Io(e) => write!(f, "io: {e}"),
            CoreError::Json(e) => write!(f, "json: {e}"),
            CoreError::BadQuantParams { detail } => write!(f, "bad quant params: {detail}"),
            CoreError::UninitializedQuant { layer } => {
                write!(f, "layer {layer:?} has uninitialized quantizer parameters; run calibration first")
            }
            CoreError::NoAttachments => write!(f, "model has no quantizer attachments"),
            CoreError::ModelFormat { detail } => write!(f, "model file: {detail}"),
            CoreError::ScaleMismatch { detail } => write!(f, "scale mismatch: {detail}"),
            CoreError::Validation { detail } => write!(f, "validation: {detail}"),
            CoreError::NonFiniteLoss { detail } => write!(f, "non-finite loss: {detail}"),
        }
    }
}

impl std::error::Error for CoreError {}

impl From<TensorError> for CoreError {
    fn from(e: TensorError) -> Self {
        CoreError::Tensor(e)
    }
}

impl From<ImagingError> for CoreError {
    fn from(e: ImagingError) -> Self {
        CoreError::Imaging(e)
    }
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e)
    }
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Json(e)
    }
}
