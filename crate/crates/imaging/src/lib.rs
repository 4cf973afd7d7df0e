//! Image ingestion and evaluation for the SR quantization pipeline: PNG
//! decode/encode, bicubic resampling for LR synthesis, BT.601 color
//! conversion, Y-channel PSNR/SSIM, and hermetic synthetic fixtures.

mod color;
mod error;
mod image_rgb;
mod metrics;
mod resample;
mod synth;

pub use color::{image_to_tensor, mean_chroma, tensor_to_image, to_y_channel};
pub use error::{ImagingError, Result};
pub use image_rgb::ImageRGB;
pub use metrics::{psnr_y, ssim_y, MetricPair};
pub use resample::{bicubic_resize, crop_border, crop_patches, crop_to_multiple, cubic_weights};
pub use synth::{synth_image, SynthKind};
