//! Datasets: (LR, HR) pairs for training/evaluation and the ground-truth-free
//! calibration set, plus the JSON manifests that describe them on disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use plq_imaging::{bicubic_resize, crop_to_multiple, image_to_tensor, ImageRGB};
use plq_tensor::Tensor;

use crate::error::{CoreError, Result};

/// One LR/HR pair as [0, 1] tensors (1×3×h×w and 1×3×(h·scale)×(w·scale)).
#[derive(Clone)]
pub struct SrPair {
    pub lr: Tensor,
    pub hr: Tensor,
}

/// Evaluation / training dataset of LR-HR pairs at one scale.
#[derive(Clone)]
pub struct SrDataset {
    pub scale: usize,
    pub pairs: Vec<SrPair>,
}

impl SrDataset {
    pub fn new(scale: usize, pairs: Vec<SrPair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            let [_, _, lh, lw] = p.lr.shape();
            let [_, _, hh, hw] = p.hr.shape();
            if hh != lh * scale || hw != lw * scale {
                return Err(CoreError::ScaleMismatch {
                    detail: format!(
                        "pair {i}: LR {lh}×{lw} vs HR {hh}×{hw} at scale {scale}"
                    ),
                });
            }
        }
        Ok(SrDataset { scale, pairs })
    }

    /// Builds pairs from HR images by bicubic downsampling.
    pub fn from_hr_images(scale: usize, images: &[ImageRGB]) -> Result<Self> {
        let mut pairs = Vec::with_capacity(images.len());
        for img in images {
            let hr_img = crop_to_multiple(img, scale)?;
            let lr_img = bicubic_resize(&hr_img, 1.0 / scale as f64)?;
            pairs.push(SrPair {
                lr: image_to_tensor(&lr_img),
                hr: image_to_tensor(&hr_img),
            });
        }
        SrDataset::new(scale, pairs)
    }
}

/// Calibration set: LR images only, batched in a fixed order.
#[derive(Clone)]
pub struct CalibrationSet {
    images: Vec<Tensor>,
    batch_size: usize,
}

impl CalibrationSet {
    pub fn new(images: Vec<Tensor>, batch_size: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(CoreError::Validation { detail: "empty calibration set".into() });
        }
        if batch_size == 0 {
            return Err(CoreError::Validation { detail: "batch size must be ≥ 1".into() });
        }
        let shape = images[0].shape();
        for (i, img) in images.iter().enumerate() {
            if img.shape() != shape {
                return Err(CoreError::Validation {
                    detail: format!(
                        "calibration image {i} has shape {:?}, expected {shape:?}",
                        img.shape()
                    ),
                });
            }
            if img.shape()[0] != 1 {
                return Err(CoreError::Validation {
                    detail: "calibration images must be single-sample tensors".into(),
                });
            }
        }
        Ok(CalibrationSet { images, batch_size })
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Number of batches N (last batch may be short).
    pub fn n_batches(&self) -> usize {
        self.images.len().div_ceil(self.batch_size)
    }

    /// Batches in fixed order at the configured batch size.
    pub fn batches(&self) -> Result<Vec<Tensor>> {
        self.batched(self.batch_size)
    }

    /// Rebatches the same images (finetuning uses its own batch size).
    pub fn batched(&self, batch_size: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for chunk in self.images.chunks(batch_size.max(1)) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            out.push(Tensor::concat_batch(&refs)?);
        }
        Ok(out)
    }
}

/// Manifest entry: an HR image path plus either an explicit LR path or a
/// synthesis factor for bicubic LR generation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub hr: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<usize>,
    pub split: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scale: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads the pairs of one split ("train", "eval", "cal", ...). Paths are
    /// resolved relative to the manifest location.
    pub fn load_split(&self, base: &Path, split: &str) -> Result<SrDataset> {
        let mut pairs = Vec::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            let hr_img = ImageRGB::load_png(base.join(&e.hr))?;
            let hr_img = crop_to_multiple(&hr_img, self.scale)?;
            let lr_img = match &e.lr {
                Some(p) => ImageRGB::load_png(base.join(p))?,
                None => {
                    let factor = e.factor.unwrap_or(self.scale);
                    bicubic_resize(&hr_img, 1.0 / factor as f64)?
                }
            };
            pairs.push(SrPair {
                lr: image_to_tensor(&lr_img),
                hr: image_to_tensor(&hr_img),
            });
        }
        if pairs.is_empty() {
            return Err(CoreError::Validation {
                detail: format!("manifest has no entries for split {split:?}"),
            });
        }
        SrDataset::new(self.scale, pairs)
    }
}

/// Calibration provenance written next to calibrated models.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibManifest {
    pub sources: Vec<String>,
    pub seed: u64,
    pub patch_size: usize,
    pub n_batches: usize,
    pub batch_size: usize,
    pub beta: f32,
}
