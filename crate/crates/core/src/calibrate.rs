//! Calibration pass: first-batch initialization of the quantizer parameters,
//! EMA refinement over the remaining batches, and the layer sensitivity
//! profile (softmax over batch-averaged feature-map standard deviations).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use plq_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::data::CalibrationSet;
use crate::net::SrModel;
use crate::quant::{project_calibrated, QuantKind, QuantParams};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CalibConfig {
    /// EMA weight on the previous estimate.
    pub beta: f32,
    /// Percentile of |activations| used to initialize the breakpoint.
    pub bp_percentile: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig { beta: 0.9, bp_percentile: 99.0 }
    }
}

/// Nearest-rank percentile: element at rank ceil(p/100 · n) of the sorted
/// collection (rank 1 for p = 0).
pub fn percentile(values: &[f32], p: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(CoreError::Validation { detail: "percentile of empty collection".into() });
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(CoreError::Validation { detail: format!("percentile {p} outside [0, 100]") });
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// One EMA step: β·prev + (1−β)·observed.
pub fn ema_update(prev: f32, observed: f32, beta: f32) -> f32 {
    beta * prev + (1.0 - beta) * observed
}

/// Per-layer sensitivity weights, summing to 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityProfile {
    weights: BTreeMap<String, f64>,
}

impl SensitivityProfile {
    /// Softmax over the per-layer scores (max-subtracted, so the profile is
    /// exactly invariant under adding a constant to every score).
    pub fn softmax(scores: &BTreeMap<String, f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(CoreError::Validation { detail: "empty sensitivity scores".into() });
        }
        let max = scores.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights = BTreeMap::new();
        let mut denom = 0.0f64;
        for (name, &s) in scores {
            let e = (s - max).exp();
            weights.insert(name.clone(), e);
            denom += e;
        }
        for v in weights.values_mut() {
            *v /= denom;
        }
        Ok(SensitivityProfile { weights })
    }

    /// Uniform 1/K profile (vanilla finetuning).
    pub fn uniform(layers: &[String]) -> Result<Self> {
        if layers.is_empty() {
            return Err(CoreError::Validation { detail: "empty layer list".into() });
        }
        let w = 1.0 / layers.len() as f64;
        Ok(SensitivityProfile {
            weights: layers.iter().map(|n| (n.clone(), w)).collect(),
        })
    }

    pub fn weight(&self, layer: &str) -> Option<f64> {
        self.weights.get(layer).copied()
    }

    pub fn layers(&self) -> impl Iterator<Item = (&String, f64)> {
        self.weights.iter().map(|(k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.weights.values().sum()
    }
}

/// Running statistics of one layer over one batch.
#[derive(Clone, Debug)]
pub(crate) struct BatchStats {
    pub min: f32,
    pub max: f32,
    pub std: f64,
    /// Values at the requested percentiles of the raw activations.
    pub pct: Vec<f32>,
    /// Values at the requested percentiles of |activations|.
    pub abs_pct: Vec<f32>,
}

/// Full-precision forward collecting per-layer stats for one batch.
pub(crate) fn batch_layer_stats(
    model: &SrModel,
    batch: &Tensor,
    percentiles: &[f64],
    abs_percentiles: &[f64],
) -> Result<BTreeMap<String, BatchStats>> {
    let mut stats = BTreeMap::new();
    model.forward_fp_hooked(batch, &mut |name, out| {
        let data = out.data();
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        let mut sum = 0.0f64;
        for &v in data {
            min = min.min(v);
            max = max.max(v);
            sum += v as f64;
        }
        let mean = sum / data.len() as f64;
        let mut var = 0.0f64;
        for &v in data {
            let d = v as f64 - mean;
            var += d * d;
        }
        let std = (var / data.len() as f64).sqrt();
        let pct = percentiles
            .iter()
            .map(|&p| percentile(data, p))
            .collect::<Result<Vec<_>>>()?;
        let abs_pct = if abs_percentiles.is_empty() {
            Vec::new()
        } else {
            let abs: Vec<f32> = data.iter().map(|v| v.abs()).collect();
            abs_percentiles
                .iter()
                .map(|&p| percentile(&abs, p))
                .collect::<Result<Vec<_>>>()?
        };
        stats.insert(name.to_string(), BatchStats { min, max, std, pct, abs_pct });
        Ok(out)
    })?;
    Ok(stats)
}

/// Maximum |W| of each attached layer (the weight-bound init).
pub(crate) fn weight_bounds(model: &SrModel) -> BTreeMap<String, f32> {
    let mut out = BTreeMap::new();
    for layer in model.layers() {
        let m = layer.weight.data().iter().fold(0.0f32, |a, &v| a.max(v.abs()));
        out.insert(layer.name.clone(), m);
    }
    out
}

/// Algorithm-1 calibration phase. One pass over the calibration set: batch 1
/// initializes (u_w, l_a, u_a, bp), later batches EMA-update the activation
/// parameters (u_w stays at its first-batch value). Returns the sensitivity
/// profile over the attached layers.
pub fn calibrate(
    model: &mut SrModel,
    cal: &CalibrationSet,
    cfg: &CalibConfig,
) -> Result<SensitivityProfile> {
    if model.attachments().is_empty() {
        return Err(CoreError::NoAttachments);
    }
    if !(0.0..=1.0).contains(&cfg.beta) {
        return Err(CoreError::Validation { detail: format!("beta {} outside [0, 1]", cfg.beta) });
    }
    let attached: Vec<String> = model.attachments().keys().cloned().collect();
    let batches = cal.batches()?;

    let mut acc: BTreeMap<String, (f32, f32, f32)> = BTreeMap::new(); // l_a, u_a, bp
    let mut std_sums: BTreeMap<String, f64> = BTreeMap::new();
    for (i, batch) in batches.iter().enumerate() {
        let stats = batch_layer_stats(model, batch, &[], &[cfg.bp_percentile])?;
        for name in &attached {
            let s = &stats[name];
            let observed = (s.min, s.max, s.abs_pct[0]);
            acc.entry(name.clone())
                .and_modify(|prev| {
                    if i > 0 {
                        prev.0 = ema_update(prev.0, observed.0, cfg.beta);
                        prev.1 = ema_update(prev.1, observed.1, cfg.beta);
                        prev.2 = ema_update(prev.2, observed.2, cfg.beta);
                    }
                })
                .or_insert(observed);
            *std_sums.entry(name.clone()).or_insert(0.0) += s.std;
        }
    }

    let n = batches.len() as f64;
    let scores: BTreeMap<String, f64> =
        std_sums.into_iter().map(|(k, v)| (k, v / n)).collect();
    let profile = SensitivityProfile::softmax(&scores)?;

    let u_w = weight_bounds(model);
    for name in &attached {
        let (l_a, u_a, bp) = acc[name];
        let att = model.attachment_mut(name).expect("attached layer exists");
        let mut wq = QuantParams::sym_weight(u_w[name].max(f32::MIN_POSITIVE), att.bits_w);
        project_calibrated(&mut wq);
        wq.validate()?;

        let mut aq = match att.act_kind {
            QuantKind::PiecewiseAct => QuantParams::piecewise_act(l_a, u_a, bp, att.bits_a),
            QuantKind::AsymUniformAct => QuantParams::asym_act(l_a, u_a, att.bits_a),
            QuantKind::SymUniformWeight => {
                return Err(CoreError::Validation {
                    detail: format!("layer {name} has weight kind as activation"),
                })
            }
        };
        project_calibrated(&mut aq);
        aq.validate()?;

        att.weight_quantizer = Some(wq);
        att.activation_quantizer = Some(aq);
    }
    Ok(profile)
}

/// Full-precision forward with each attached layer's activation clamped to
/// its [fraction/2, 1 − fraction/2] percentile band (per tensor, per batch).
pub fn clip_outliers_fp(model: &SrModel, input: &Tensor, fraction: f64) -> Result<Tensor> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(CoreError::Validation {
            detail: format!("clip fraction {fraction} outside (0, 1)"),
        });
    }
    let p_low = fraction / 2.0 * 100.0;
    let p_high = (1.0 - fraction / 2.0) * 100.0;
    model.forward_fp_hooked(input, &mut |name, out| {
        if !model.attachments().contains_key(name) {
            return Ok(out);
        }
        let lo = percentile(out.data(), p_low)?;
        let hi = percentile(out.data(), p_high)?;
        let clipped: Vec<f32> = out.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Ok(Tensor::new(out.shape(), clipped)?)
    })
}
