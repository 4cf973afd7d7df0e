use std::path::Path;

use crate::error::{ImagingError, Result};

/// 8-bit RGB image, samples interleaved row-major (R, G, B per pixel).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    samples: Vec<u8>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, samples: Vec<u8>) -> Result<Self> {
        let expected = 3 * width * height;
        if samples.len() != expected {
            return Err(ImagingError::SampleCount { expected, got: samples.len() });
        }
        Ok(ImageRGB { width, height, samples })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut samples = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            samples.extend_from_slice(&rgb);
        }
        ImageRGB { width, height, samples }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.samples[i], self.samples[i + 1], self.samples[i + 2]]
    }

    pub fn load_png<P: AsRef<Path>>(path: P) -> Result<Self> {
        let dynimg = image::open(path.as_ref()).map_err(|e| ImagingError::Codec(e.to_string()))?;
        let rgb = dynimg.to_rgb8();
        ImageRGB::new(rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
    }

    pub fn save_png<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.samples.clone())
            .ok_or_else(|| ImagingError::Codec("buffer size mismatch".into()))?;
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)
            .map_err(|e| ImagingError::Codec(e.to_string()))
    }
}
