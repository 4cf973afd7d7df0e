//! Outlier-aware post-training quantization for small SR networks.
//!
//! Pipeline: build or import an EDSR-style model ([`net`]), attach quantizers
//! ([`quant`]), run the EMA calibration pass ([`calibrate`]), then optimize
//! the quantization parameters with the staged sensitivity-aware finetuner
//! ([`finetune`]). [`baselines`] and [`analysis`] provide the simple PTQ
//! calibrators, the per-layer sensitivity sweep, the ablation grid, and the
//! outlier-clipping experiment.

pub mod analysis;
pub mod baselines;
pub mod calibrate;
pub mod data;
mod error;
pub mod finetune;
pub mod net;
pub mod optim;
pub mod quant;

pub use error::{CoreError, Result};
