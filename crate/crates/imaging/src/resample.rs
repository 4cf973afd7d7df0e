//! Bicubic resampling (Catmull-Rom, a = −0.5) and deterministic cropping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ImagingError, Result};
use crate::image_rgb::ImageRGB;

const A: f64 = -0.5;

fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// The four tap weights for a sample offset `frac` ∈ [0, 1) from the
/// left-center tap. Exposed so tests can check the partition of unity.
pub fn cubic_weights(frac: f64) -> [f64; 4] {
    [cubic(frac + 1.0), cubic(frac), cubic(frac - 1.0), cubic(frac - 2.0)]
}

const FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Resizes with a separable Catmull-Rom kernel, edge-clamped. Factor must be
/// one of 1/4, 1/2, 1, 2, 4; pixel centers align (src = (dst + 0.5)/f − 0.5).
pub fn bicubic_resize(img: &ImageRGB, factor: f64) -> Result<ImageRGB> {
    if !FACTORS.iter().any(|&f| f == factor) {
        return Err(ImagingError::BadFactor(factor));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width(), img.height());
    let ow = ((w as f64) * factor).round() as usize;
    let oh = ((h as f64) * factor).round() as usize;
    if ow == 0 || oh == 0 {
        return Err(ImagingError::BadFactor(factor));
    }

    // horizontal pass into a float buffer, then vertical pass
    let mut horiz = vec![0.0f64; 3 * ow * h];
    for y in 0..h {
        for ox in 0..ow {
            let src = (ox as f64 + 0.5) / factor - 0.5;
            let base = src.floor() as isize;
            let wts = cubic_weights(src - base as f64);
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in wts.iter().enumerate() {
                    let sx = (base - 1 + k as isize).clamp(0, w as isize - 1) as usize;
                    acc += wt * img.samples()[3 * (y * w + sx) + c] as f64;
                }
                horiz[3 * (y * ow + ox) + c] = acc;
            }
        }
    }

    let mut out = vec![0u8; 3 * ow * oh];
    for oy in 0..oh {
        let src = (oy as f64 + 0.5) / factor - 0.5;
        let base = src.floor() as isize;
        let wts = cubic_weights(src - base as f64);
        for ox in 0..ow {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in wts.iter().enumerate() {
                    let sy = (base - 1 + k as isize).clamp(0, h as isize - 1) as usize;
                    acc += wt * horiz[3 * (sy * ow + ox) + c];
                }
                out[3 * (oy * ow + ox) + c] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageRGB::new(ow, oh, out)
}

/// Removes `px` pixels from every border (SR metric convention).
pub fn crop_border(img: &ImageRGB, px: usize) -> Result<ImageRGB> {
    let (w, h) = (img.width(), img.height());
    if 2 * px >= w || 2 * px >= h {
        return Err(ImagingError::BadCrop {
            detail: format!("border {px} too large for {w}×{h}"),
        });
    }
    crop(img, px, px, w - 2 * px, h - 2 * px)
}

fn crop(img: &ImageRGB, x0: usize, y0: usize, cw: usize, ch: usize) -> Result<ImageRGB> {
    let mut samples = Vec::with_capacity(3 * cw * ch);
    for y in y0..y0 + ch {
        let row = &img.samples()[3 * (y * img.width() + x0)..3 * (y * img.width() + x0 + cw)];
        samples.extend_from_slice(row);
    }
    ImageRGB::new(cw, ch, samples)
}

/// Deterministic seeded square crops of side `size`.
pub fn crop_patches(img: &ImageRGB, size: usize, count: usize, seed: u64) -> Result<Vec<ImageRGB>> {
    let (w, h) = (img.width(), img.height());
    if size == 0 || size > w || size > h {
        return Err(ImagingError::BadCrop {
            detail: format!("patch {size} does not fit in {w}×{h}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(count);
    for _ in 0..count {
        let x0 = if w == size { 0 } else { rng.gen_range(0..=w - size) };
        let y0 = if h == size { 0 } else { rng.gen_range(0..=h - size) };
        patches.push(crop(img, x0, y0, size, size)?);
    }
    Ok(patches)
}

/// Center crop to an exact multiple of `m` in both dimensions.
pub fn crop_to_multiple(img: &ImageRGB, m: usize) -> Result<ImageRGB> {
    let cw = (img.width() / m) * m;
    let ch = (img.height() / m) * m;
    if cw == 0 || ch == 0 {
        return Err(ImagingError::BadCrop {
            detail: format!("image {}×{} smaller than multiple {m}", img.width(), img.height()),
        });
    }
    crop(img, (img.width() - cw) / 2, (img.height() - ch) / 2, cw, ch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity() {
        for i in 0..100 {
            let frac = i as f64 / 100.0;
            let s: f64 = cubic_weights(frac).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "weights sum {s} at frac {frac}");
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let img = ImageRGB::filled(6, 4, [9, 120, 230]);
        assert_eq!(bicubic_resize(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageRGB::filled(16, 16, [7, 180, 99]);
        for factor in [0.25, 0.5, 2.0, 4.0] {
            let out = bicubic_resize(&img, factor).unwrap();
            assert!(
                out.samples().chunks_exact(3).all(|px| px == [7, 180, 99]),
                "factor {factor} broke constancy"
            );
        }
    }

    #[test]
    fn linear_ramp_downsamples_to_linear_ramp() {
        // horizontal ramp: all channels = 4x, width 64 → halves to slope 8
        let w = 64;
        let mut samples = Vec::new();
        for _y in 0..16 {
            for x in 0..w {
                let v = (4 * x) as u8;
                samples.extend_from_slice(&[v, v, v]);
            }
        }
        let img = ImageRGB::new(w, 16, samples).unwrap();
        let half = bicubic_resize(&img, 0.5).unwrap();
        for y in 0..half.height() {
            for x in 2..half.width() - 2 {
                let expected = 4.0 * ((x as f64 + 0.5) * 2.0 - 0.5);
                let got = half.pixel(x, y)[0] as f64;
                assert!(
                    (got - expected).abs() <= 1.0,
                    "ramp bent at x={x}: got {got}, expected {expected}"
                );
            }
        }
    }

    #[test]
    fn unsupported_factor_rejected() {
        let img = ImageRGB::filled(8, 8, [0, 0, 0]);
        assert!(matches!(bicubic_resize(&img, 3.0), Err(ImagingError::BadFactor(_))));
    }

    #[test]
    fn crops_are_seed_deterministic() {
        let img = crate::synth::synth_image(
            crate::synth::SynthKind::GaussianNoise { mean: 128.0, sigma: 50.0 },
            42,
            32,
            32,
        );
        let a = crop_patches(&img, 8, 5, 7).unwrap();
        let b = crop_patches(&img, 8, 5, 7).unwrap();
        assert_eq!(a, b);
        let c = crop_patches(&img, 8, 5, 8).unwrap();
        assert_ne!(a, c);
    }
}
