use std::fmt;

pub type Result<T> = std::result::Result<T, ImagingError>;

#[derive(Debug)]
pub enum ImagingError {
    Io(std::io::Error),
    /// PNG decode/encode failure.
    Codec(String),
    /// Sample buffer does not match 3·w·h.
    SampleCount { expected: usize, got: usize },
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    /// Operation needs larger images (e.g. the 11×11 SSIM window).
    TooSmall { min: usize, got: usize },
    /// Resize factor outside {1/4, 1/2, 1, 2, 4} or degenerate output size.
    BadFactor(f64),
    /// Crop/patch parameters exceed the image bounds.
    BadCrop { detail: String },
    /// Tensor bridge received an incompatible shape.
    BadTensor(String),
}

impl fmt::Display for ImagingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImagingError::Io(e) => write!(f, "io error: {e}"),
            ImagingError::Codec(m) => write!(f, "png codec error: {m}"),
            ImagingError::SampleCount { expected, got } => {
                write!(f, "sample count {got}, expected {expected}")
            }
            ImagingError::DimensionMismatch { a, b } => {
                write!(f, "image dimensions differ: {}×{} vs {}×{}", a.0, a.1, b.0, b.1)
            }
            ImagingError::TooSmall { min, got } => {
                write!(f, "image too small: need ≥ {min}, got {got}")
            }
            ImagingError::BadFactor(v) => write!(f, "unsupported resize factor {v}"),
            ImagingError::BadCrop { detail } => write!(f, "bad crop: {detail}"),
            ImagingError::BadTensor(m) => write!(f, "tensor bridge: {m}"),
        }
    }
}

impl std::error::Error for ImagingError {}

impl From<std::io::Error> for ImagingError {
    fn from(e: std::io::Error) -> Self {
        ImagingError::Io(e)
    }
}
