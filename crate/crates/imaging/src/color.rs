//! BT.601 color conversion and the image ↔ tensor bridge.

use plq_tensor::Tensor;

use crate::error::{ImagingError, Result};
use crate::image_rgb::ImageRGB;

/// ITU-R BT.601 luma on the [0, 255] scale, kept in floating point:
/// Y = 0.299 R + 0.587 G + 0.114 B. Returned as a 1×1×H×W tensor.
pub fn to_y_channel(img: &ImageRGB) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let mut data = Vec::with_capacity(w * h);
    for px in img.samples().chunks_exact(3) {
        data.push(luma(px[0], px[1], px[2]));
    }
    Tensor::new([1, 1, h, w], data).expect("luma of a valid image is finite")
}

pub(crate) fn luma(r: u8, g: u8, b: u8) -> f32 {
    0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32
}

/// Mean BT.601 chroma (Cb, Cr) over the image, centered at zero.
pub fn mean_chroma(img: &ImageRGB) -> (f64, f64) {
    let mut cb = 0.0f64;
    let mut cr = 0.0f64;
    for px in img.samples().chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        cb += -0.168736 * r - 0.331264 * g + 0.5 * b;
        cr += 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
    let n = (img.width() * img.height()) as f64;
    (cb / n, cr / n)
}

/// Image to 1×3×H×W tensor with values in [0, 1].
pub fn image_to_tensor(img: &ImageRGB) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in img.samples().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([1, 3, h, w], data).expect("image data is finite")
}

/// 1×3×H×W tensor in [0, 1] (values outside are clamped) back to 8-bit RGB.
pub fn tensor_to_image(t: &Tensor) -> Result<ImageRGB> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 3 {
        return Err(ImagingError::BadTensor(format!("expected 1×3×H×W, got {:?}", t.shape())));
    }
    let mut samples = vec![0u8; 3 * w * h];
    let data = t.data();
    for i in 0..w * h {
        for ch in 0..3 {
            let v = (data[ch * w * h + i].clamp(0.0, 1.0) * 255.0).round();
            samples[3 * i + ch] = v as u8;
        }
    }
    ImageRGB::new(w, h, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_reference_points() {
        assert_eq!(luma(255, 255, 255), 255.0);
        assert_eq!(luma(0, 0, 0), 0.0);
        // pure red: 0.299 · 255
        assert!((luma(255, 0, 0) - 76.245).abs() < 1e-3);
    }

    #[test]
    fn y_channel_shape_and_values() {
        let img = ImageRGB::filled(4, 2, [255, 0, 0]);
        let y = to_y_channel(&img);
        assert_eq!(y.shape(), [1, 1, 2, 4]);
        assert!(y.data().iter().all(|&v| (v - 76.245).abs() < 1e-3));
    }

    #[test]
    fn tensor_bridge_round_trip() {
        let mut samples = Vec::new();
        for i in 0..(3 * 5 * 4) {
            samples.push((i * 29 % 256) as u8);
        }
        let img = ImageRGB::new(5, 4, samples).unwrap();
        let t = image_to_tensor(&img);
        let back = tensor_to_image(&t).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn gray_image_has_zero_mean_chroma() {
        let img = ImageRGB::filled(8, 8, [100, 100, 100]);
        let (cb, cr) = mean_chroma(&img);
        assert!(cb.abs() < 1e-9 && cr.abs() < 1e-9);
    }
}
