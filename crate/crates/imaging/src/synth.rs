//! Deterministic synthetic test images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image_rgb::ImageRGB;

/// Families of synthetic fixtures. All are pure functions of (kind, seed, dims).
#[derive(Clone, Copy, Debug)]
pub enum SynthKind {
    /// Linear gradients with seed-dependent orientation per channel.
    Ramp,
    /// Two-color checkerboard with the given cell period.
    Checker { period: usize },
    /// Full-hue wheel around the image center (chroma-rich fixture).
    ColorWheel,
    /// Per-sample Gaussian noise, clamped to [0, 255].
    GaussianNoise { mean: f32, sigma: f32 },
}

pub fn synth_image(kind: SynthKind, seed: u64, width: usize, height: usize) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0u8; 3 * width * height];
    match kind {
        SynthKind::Ramp => {
            let flip: [bool; 3] = [rng.gen(), rng.gen(), rng.gen()];
            for y in 0..height {
                for x in 0..width {
                    let fx = x as f64 / (width.max(2) - 1) as f64;
                    let fy = y as f64 / (height.max(2) - 1) as f64;
                    let vals = [fx, fy, 0.5 * (fx + fy)];
                    for c in 0..3 {
                        let v = if flip[c] { 1.0 - vals[c] } else { vals[c] };
                        samples[3 * (y * width + x) + c] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
        SynthKind::Checker { period } => {
            let period = period.max(1);
            let a: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let b: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
            for y in 0..height {
                for x in 0..width {
                    let cell = (x / period + y / period) % 2;
                    let color = if cell == 0 { a } else { b };
                    samples[3 * (y * width + x)..3 * (y * width + x) + 3]
                        .copy_from_slice(&color);
                }
            }
        }
        SynthKind::ColorWheel => {
            let hue_offset: f64 = rng.gen_range(0.0..360.0);
            let cx = (width as f64 - 1.0) / 2.0;
            let cy = (height as f64 - 1.0) / 2.0;
            let rmax = cx.hypot(cy).max(1.0);
            for y in 0..height {
                for x in 0..width {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    let hue = (dy.atan2(dx).to_degrees() + 360.0 + hue_offset) % 360.0;
                    let sat = (dx.hypot(dy) / rmax).min(1.0);
                    let rgb = hsv_to_rgb(hue, sat, 1.0);
                    samples[3 * (y * width + x)..3 * (y * width + x) + 3].copy_from_slice(&rgb);
                }
            }
        }
        SynthKind::GaussianNoise { mean, sigma } => {
            for s in samples.iter_mut() {
                let v = mean as f64 + sigma as f64 * gaussian(&mut rng);
                *s = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageRGB::new(width, height, samples).expect("constructed buffer is consistent")
}

/// Standard normal via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}
