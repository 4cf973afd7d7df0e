//! Y-channel PSNR and SSIM.

use crate::color::luma;
use crate::error::{ImagingError, Result};
use crate::image_rgb::ImageRGB;

/// PSNR in dB plus SSIM for one image pair.
#[derive(Clone, Copy, Debug)]
pub struct MetricPair {
    /// `f64::INFINITY` sentinel for identical images.
    pub psnr_db: f64,
    pub ssim: f64,
}

fn y_plane(img: &ImageRGB) -> Vec<f64> {
    img.samples()
        .chunks_exact(3)
        .map(|px| luma(px[0], px[1], px[2]) as f64)
        .collect()
}

/// 10·log10(255² / MSE) on the BT.601 Y plane; ∞ for identical images.
pub fn psnr_y(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(ImagingError::DimensionMismatch {
            a: (a.width(), a.height()),
            b: (b.width(), b.height()),
        });
    }
    let (ya, yb) = (y_plane(a), y_plane(b));
    let mut se = 0.0f64;
    for (x, y) in ya.iter().zip(&yb) {
        let d = x - y;
        se += d * d;
    }
    let mse = se / ya.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM on the Y plane: 11×11 Gaussian window (σ = 1.5),
/// C1 = (0.01·255)², C2 = (0.03·255)², windows fully inside the image.
pub fn ssim_y(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(ImagingError::DimensionMismatch {
            a: (a.width(), a.height()),
            b: (b.width(), b.height()),
        });
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(ImagingError::TooSmall { min: SSIM_WINDOW, got: w.min(h) });
    }
    let (ya, yb) = (y_plane(a), y_plane(b));
    let win = gaussian_window();
    let c1 = (0.01 * 255.0f64).powi(2);
    let c2 = (0.03 * 255.0f64).powi(2);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let k = win[wy * SSIM_WINDOW + wx];
                    let i = (oy + wy) * w + ox + wx;
                    mu_a += k * ya[i];
                    mu_b += k * yb[i];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let k = win[wy * SSIM_WINDOW + wx];
                    let i = (oy + wy) * w + ox + wx;
                    let da = ya[i] - mu_a;
                    let db = yb[i] - mu_b;
                    var_a += k * da * da;
                    var_b += k * db * db;
                    cov += k * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
