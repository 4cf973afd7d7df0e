//! Staged fine-tuning of quantization parameters: the epoch schedule cycles
//! through u_w, then (l_a, u_a), then bp, optimizing the sensitivity-aware
//! loss with Adam while the network weights stay frozen.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use plq_tensor::{add, batch_slice, div_scalar, l1_diff, l2_diff, l2_norm, scalar_mul, GradTape, Tensor};

use crate::calibrate::SensitivityProfile;
use crate::data::CalibrationSet;
use crate::error::{CoreError, Result};
use crate::net::{ParamTensors, SrModel};
use crate::optim::{Adam, AdamConfig};
use crate::quant::{project_group, ParamGroup, QuantKind};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Multiplicative decay applied at the end of every epoch.
    pub lr_decay: f32,
    /// Weight of the reconstruction term in the total loss.
    pub lambda: f32,
    /// Length of the parameter-group cycle.
    pub stage_period: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 2,
            lr: 1e-3,
            lr_decay: 0.9,
            lambda: 5.0,
            stage_period: 3,
        }
    }
}

impl FinetuneConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.stage_period == 0 {
            return Err(CoreError::Validation {
                detail: "epochs, batch_size, and stage_period must be positive".into(),
            });
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || self.lambda < 0.0 {
            return Err(CoreError::Validation {
                detail: "lr and lr_decay must be positive, lambda ≥ 0".into(),
            });
        }
        Ok(())
    }
}

/// Maps 1-based epochs onto parameter groups: mod 3 = 1 → u_w,
/// mod 3 = 2 → (l_a, u_a), mod 3 = 0 → bp.
pub struct StagePlan;

impl StagePlan {
    pub fn group_for_epoch(epoch: usize) -> ParamGroup {
        match epoch % 3 {
            1 => ParamGroup::WeightBound,
            2 => ParamGroup::ActBounds,
            _ => ParamGroup::Breakpoint,
        }
    }
}

/// Mean L1 distance between the reference and quantized outputs.
pub fn loss_rec(fp_out: &Tensor, q_out: &Tensor) -> Result<Tensor> {
    Ok(l1_diff(fp_out, q_out)?)
}

/// Sensitivity-aware feature loss: Σ_k s_k · ‖F_K/‖F_K‖₂ − F_Q/‖F_Q‖₂‖₂,
/// normalized and measured per sample, averaged over the batch. Zero-norm
/// feature maps contribute nothing (logged).
pub fn loss_sen(
    captured_fp: &BTreeMap<String, Tensor>,
    captured_q: &BTreeMap<String, Tensor>,
    profile: &SensitivityProfile,
) -> Result<Tensor> {
    let fp_keys: Vec<&String> = captured_fp.keys().collect();
    let q_keys: Vec<&String> = captured_q.keys().collect();
    if fp_keys != q_keys {
        return Err(CoreError::Validation {
            detail: format!("feature key sets differ: {fp_keys:?} vs {q_keys:?}"),
        });
    }
    let mut total = Tensor::scalar(0.0)?;
    let mut batch = 1usize;
    for (name, fq) in captured_q {
        let fk = &captured_fp[name];
        let s_k = profile.weight(name).ok_or_else(|| CoreError::Validation {
            detail: format!("sensitivity profile missing layer {name:?}"),
        })?;
        if fk.shape() != fq.shape() {
            return Err(CoreError::Validation {
                detail: format!("feature shapes differ at {name:?}"),
            });
        }
        batch = fq.shape()[0];
        for j in 0..batch {
            let fkj = batch_slice(fk, j)?;
            let fqj = batch_slice(fq, j)?;
            let nk = l2_norm(&fkj)?;
            let nq = l2_norm(&fqj)?;
            if nk.scalar_value()? == 0.0 || nq.scalar_value()? == 0.0 {
                log::warn!("zero-norm feature map at layer {name}, sample {j}; term skipped");
                continue;
            }
            let term = l2_diff(&div_scalar(&fkj, &nk)?, &div_scalar(&fqj, &nq)?)?;
            total = add(&total, &scalar_mul(&term, s_k as f32)?)?;
        }
    }
    Ok(scalar_mul(&total, 1.0 / batch as f32)?)
}

/// L_all = L_sen + λ·L_rec.
pub fn loss_all(rec: &Tensor, sen: &Tensor, lambda: f32) -> Result<Tensor> {
    Ok(add(sen, &scalar_mul(rec, lambda)?)?)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub l_a: f32,
    pub u_a: f32,
    pub bp: f32,
    pub u_w: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub stage: ParamGroup,
    pub step: usize,
    pub lr: f32,
    pub l_rec: f32,
    pub l_sen: f32,
    pub l_all: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: ParamGroup,
    pub lr: f32,
    pub params: BTreeMap<String, ParamSnapshot>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl FinetuneLog {
    /// JSON-lines dump: one line per step, then one per epoch snapshot.
    pub fn write_jsonl<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path.as_ref(), out)?;
        Ok(())
    }
}

fn snapshot(model: &SrModel) -> BTreeMap<String, ParamSnapshot> {
    model
        .attachments()
        .iter()
        .map(|(name, att)| {
            let a = att.activation_quantizer.unwrap_or(crate::quant::QuantParams::asym_act(
                0.0, 1.0, 8,
            ));
            let w = att.weight_quantizer.map(|w| w.u_w).unwrap_or(0.0);
            (
                name.clone(),
                ParamSnapshot { l_a: a.l_a, u_a: a.u_a, bp: a.bp, u_w: w },
            )
        })
        .collect()
}

/// Mean losses of the current parameters over the calibration set without
/// touching them (used for before/after comparisons).
pub fn mean_losses(
    model: &SrModel,
    cal: &CalibrationSet,
    profile: &SensitivityProfile,
    lambda: f32,
    batch_size: usize,
) -> Result<(f64, f64, f64)> {
    let capture: BTreeSet<String> = model.attachments().keys().cloned().collect();
    let mut sums = (0.0f64, 0.0f64, 0.0f64);
    let batches = cal.batched(batch_size)?;
    for batch in &batches {
        let (fp_out, fp_feat) =
            model.forward(batch, crate::net::ForwardMode::FullPrecision, Some(&capture))?;
        let (q_out, q_feat) =
            model.forward(batch, crate::net::ForwardMode::Quantized, Some(&capture))?;
        let rec = loss_rec(&fp_out, &q_out)?;
        let sen = loss_sen(&fp_feat, &q_feat, profile)?;
        let all = loss_all(&rec, &sen, lambda)?;
        sums.0 += rec.scalar_value()? as f64;
        sums.1 += sen.scalar_value()? as f64;
        sums.2 += all.scalar_value()? as f64;
    }
    let n = batches.len() as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

/// Algorithm-1 fine-tuning phase. Network weights are never updated; only
/// the active parameter group moves each epoch, followed by the ordering
/// projection. Data order is fixed, so runs are bitwise reproducible.
pub fn finetune(
    model: &mut SrModel,
    cal: &CalibrationSet,
    profile: &SensitivityProfile,
    cfg: &FinetuneConfig,
) -> Result<FinetuneLog> {
    cfg.validate()?;
    if model.attachments().is_empty() {
        return Err(CoreError::NoAttachments);
    }
    for (name, att) in model.attachments() {
        if att.weight_quantizer.is_none() || att.activation_quantizer.is_none() {
            return Err(CoreError::UninitializedQuant { layer: name.clone() });
        }
        if profile.weight(name).is_none() {
            return Err(CoreError::Validation {
                detail: format!("sensitivity profile missing attached layer {name:?}"),
            });
        }
    }

    let layer_names: Vec<String> = model.attachments().keys().cloned().collect();
    let capture: BTreeSet<String> = layer_names.iter().cloned().collect();
    let batches = cal.batched(cfg.batch_size)?;

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    // slot layout per layer: [u_w, l_a, u_a, bp]
    let slots: BTreeMap<String, [usize; 4]> = layer_names
        .iter()
        .map(|n| (n.clone(), [adam.register(1), adam.register(1), adam.register(1), adam.register(1)]))
        .collect();

    let mut log = FinetuneLog::default();
    for epoch in 1..=cfg.epochs {
        let group = StagePlan::group_for_epoch(epoch);
        for (step, batch) in batches.iter().enumerate() {
            let (fp_out, fp_feat) =
                model.forward(batch, crate::net::ForwardMode::FullPrecision, Some(&capture))?;

            let tape = GradTape::new();
            let mut overlay = crate::net::ParamOverlay::new();
            // watched[(layer, field)] = tensor handle for the active group
            let mut watched: Vec<(String, usize, Tensor)> = Vec::new();
            for name in &layer_names {
                let att = &model.attachments()[name];
                let aq = att.activation_quantizer.expect("validated above");
                let wq = att.weight_quantizer.expect("validated above");
                let mut pt = ParamTensors {
                    u_w: Some(Tensor::scalar(wq.u_w)?),
                    l_a: Some(Tensor::scalar(aq.l_a)?),
                    u_a: Some(Tensor::scalar(aq.u_a)?),
                    bp: (aq.kind == QuantKind::PiecewiseAct)
                        .then(|| Tensor::scalar(aq.bp))
                        .transpose()?,
                };
                match group {
                    ParamGroup::WeightBound => {
                        let t = tape.watch(pt.u_w.as_ref().unwrap());
                        watched.push((name.clone(), 0, t.clone()));
                        pt.u_w = Some(t);
                    }
                    ParamGroup::ActBounds => {
                        let tl = tape.watch(pt.l_a.as_ref().unwrap());
                        let tu = tape.watch(pt.u_a.as_ref().unwrap());
                        watched.push((name.clone(), 1, tl.clone()));
                        watched.push((name.clone(), 2, tu.clone()));
                        pt.l_a = Some(tl);
                        pt.u_a = Some(tu);
                    }
                    ParamGroup::Breakpoint => {
                        if let Some(bp) = &pt.bp {
                            let tb = tape.watch(bp);
                            watched.push((name.clone(), 3, tb.clone()));
                            pt.bp = Some(tb);
                        }
                    }
                }
                overlay.insert(name.clone(), pt);
            }

            let (q_out, q_feat) = model.forward_quantized_overlay(batch, &overlay, Some(&capture))?;
            let rec = loss_rec(&fp_out.detach(), &q_out)?;
            let sen = loss_sen(&fp_feat, &q_feat, profile)?;
            let all = loss_all(&rec, &sen, cfg.lambda)?;
            let (rec_v, sen_v, all_v) =
                (rec.scalar_value()?, sen.scalar_value()?, all.scalar_value()?);
            if !all_v.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    detail: format!(
                        "epoch {epoch} step {step}: L_rec={rec_v}, L_sen={sen_v}, L_all={all_v}"
                    ),
                });
            }

            let grads = tape.backward(&all)?;
            for (name, field, tensor) in &watched {
                let g = grads.get(tensor).expect("watched param has gradient");
                let mut value = [tensor.data()[0]];
                adam.step(slots[name][*field], &mut value, g.data());
                let att = model.attachment_mut(name).expect("attachment exists");
                match field {
                    0 => att.weight_quantizer.as_mut().unwrap().u_w = value[0],
                    1 => att.activation_quantizer.as_mut().unwrap().l_a = value[0],
                    2 => att.activation_quantizer.as_mut().unwrap().u_a = value[0],
                    _ => att.activation_quantizer.as_mut().unwrap().bp = value[0],
                }
            }
            // project only the active group so frozen groups stay bitwise intact
            for name in &layer_names {
                let att = model.attachment_mut(name).expect("attachment exists");
                match group {
                    ParamGroup::WeightBound => {
                        project_group(att.weight_quantizer.as_mut().unwrap(), group)
                    }
                    _ => project_group(att.activation_quantizer.as_mut().unwrap(), group),
                }
            }

            log.steps.push(StepRecord {
                epoch,
                stage: group,
                step,
                lr: adam.lr(),
                l_rec: rec_v,
                l_sen: sen_v,
                l_all: all_v,
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            stage: group,
            lr: adam.lr(),
            params: snapshot(model),
        });
        adam.set_lr(adam.lr() * cfg.lr_decay);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{calibrate, CalibConfig};
    use crate::net::{AttachPlan, FirstLastPolicy, SrConfig};
    use crate::quant::QuantParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_plan_cycles_uw_bounds_bp() {
        use ParamGroup::*;
        let groups: Vec<ParamGroup> = (1..=6).map(StagePlan::group_for_epoch).collect();
        assert_eq!(groups, vec![WeightBound, ActBounds, Breakpoint, WeightBound, ActBounds, Breakpoint]);
    }

    #[test]
    fn lr_decays_geometrically() {
        let cfg = FinetuneConfig::default();
        let mut lr = cfg.lr;
        for _ in 1..10 {
            lr *= cfg.lr_decay;
        }
        assert!((lr - 0.001 * 0.9f32.powi(9)).abs() < 1e-9);
        assert!((lr - 4.304672e-4).abs() < 1e-7);
    }

    #[test]
    fn loss_rec_examples() {
        let a = Tensor::new([1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(loss_rec(&a, &a).unwrap().scalar_value().unwrap(), 0.0);
        let b = Tensor::new([1, 1, 2, 2], vec![0.2, 0.3, 0.4, 0.5]).unwrap();
        let v = loss_rec(&a, &b).unwrap().scalar_value().unwrap();
        assert!((v - 0.1).abs() < 1e-7);
    }

    #[test]
    fn loss_rec_gradient_is_sign_over_n() {
        let tape = GradTape::new();
        let fp = Tensor::new([1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let q = tape.watch(&Tensor::new([1, 1, 2, 2], vec![0.5, -0.5, 0.5, 2.0]).unwrap());
        let loss = loss_rec(&fp, &q).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // d/dq mean|fp − q| = sign(q − fp)/n
        assert_eq!(grads.get(&q).unwrap().data(), &[0.25, -0.25, -0.25, 0.25]);
    }

    fn map_of(entries: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn loss_sen_identity_and_scale_invariance() {
        let f = Tensor::new([1, 1, 1, 4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let profile = SensitivityProfile::uniform(&["l1".to_string()]).unwrap();
        let zero = loss_sen(&map_of(&[("l1", f.clone())]), &map_of(&[("l1", f.clone())]), &profile)
            .unwrap();
        assert_eq!(zero.scalar_value().unwrap(), 0.0);

        let doubled = plq_tensor::scalar_mul(&f, 2.0).unwrap();
        let scaled = loss_sen(&map_of(&[("l1", f.clone())]), &map_of(&[("l1", doubled)]), &profile)
            .unwrap();
        assert_eq!(scaled.scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn loss_sen_orthogonal_unit_vectors() {
        // layer 1 differs by orthogonal unit vectors → s₁·√2 with s = (0.3, 0.7)
        let e1 = Tensor::new([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let shared = Tensor::new([1, 1, 1, 2], vec![0.6, 0.8]).unwrap();
        let mut weights = BTreeMap::new();
        weights.insert("a".to_string(), 0.3);
        weights.insert("b".to_string(), 0.7);
        let profile = SensitivityProfile::from_weights(weights).unwrap();
        let v = loss_sen(
            &map_of(&[("a", e1), ("b", shared.clone())]),
            &map_of(&[("a", e2), ("b", shared)]),
            &profile,
        )
        .unwrap()
        .scalar_value()
        .unwrap();
        assert!((v - 0.3 * 2.0f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn loss_all_arithmetic() {
        let rec = Tensor::scalar(0.1).unwrap();
        let sen = Tensor::scalar(0.2).unwrap();
        assert!((loss_all(&rec, &sen, 5.0).unwrap().scalar_value().unwrap() - 0.7).abs() < 1e-7);
        assert_eq!(
            loss_all(&rec, &sen, 0.0).unwrap().scalar_value().unwrap(),
            sen.scalar_value().unwrap()
        );
        let z = Tensor::scalar(0.0).unwrap();
        assert_eq!(loss_all(&z, &z, 5.0).unwrap().scalar_value().unwrap(), 0.0);
    }

    fn calibrated_fixture(seed: u64) -> (SrModel, CalibrationSet, SensitivityProfile) {
        let mut model = SrModel::new(
            SrConfig { scale: 2, channels: 8, n_blocks: 2, residual_scale: 1.0 },
            seed,
        )
        .unwrap();
        model
            .attach_quantizers(AttachPlan {
                act_kind: QuantKind::PiecewiseAct,
                bits_w: 4,
                bits_a: 4,
                policy: FirstLastPolicy::EightBit,
            })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let images: Vec<Tensor> = (0..8)
            .map(|_| {
                let data = (0..3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
                Tensor::new([1, 3, 8, 8], data).unwrap()
            })
            .collect();
        let cal = CalibrationSet::new(images, 4).unwrap();
        let profile = calibrate(&mut model, &cal, &CalibConfig::default()).unwrap();
        (model, cal, profile)
    }

    #[test]
    fn freeze_follows_the_stage_schedule() {
        let (mut model, cal, profile) = calibrated_fixture(31);
        let before = snapshot(&model);
        let cfg = FinetuneConfig { epochs: 3, batch_size: 2, ..FinetuneConfig::default() };
        let log = finetune(&mut model, &cal, &profile, &cfg).unwrap();

        let e1 = &log.epochs[0];
        let e2 = &log.epochs[1];
        let e3 = &log.epochs[2];
        for (name, b) in &before {
            // epoch 1 (u_w): activation params bitwise frozen
            let p1 = &e1.params[name];
            assert_eq!(p1.l_a.to_bits(), b.l_a.to_bits());
            assert_eq!(p1.u_a.to_bits(), b.u_a.to_bits());
            assert_eq!(p1.bp.to_bits(), b.bp.to_bits());
            // epoch 2 (l_a, u_a): u_w and bp bitwise frozen
            let p2 = &e2.params[name];
            assert_eq!(p2.u_w.to_bits(), p1.u_w.to_bits());
            assert_eq!(p2.bp.to_bits(), p1.bp.to_bits());
            // epoch 3 (bp): u_w, l_a, u_a bitwise frozen
            let p3 = &e3.params[name];
            assert_eq!(p3.u_w.to_bits(), p2.u_w.to_bits());
            assert_eq!(p3.l_a.to_bits(), p2.l_a.to_bits());
            assert_eq!(p3.u_a.to_bits(), p2.u_a.to_bits());
        }
        // u_w actually moved during epoch 1 for at least one layer
        assert!(before.iter().any(|(n, b)| e1.params[n].u_w != b.u_w));
    }

    #[test]
    fn weights_are_never_touched() {
        let (mut model, cal, profile) = calibrated_fixture(32);
        let before: Vec<Vec<u32>> = model
            .layers()
            .iter()
            .map(|l| l.weight.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        finetune(
            &mut model,
            &cal,
            &profile,
            &FinetuneConfig { epochs: 4, ..FinetuneConfig::default() },
        )
        .unwrap();
        let after: Vec<Vec<u32>> = model
            .layers()
            .iter()
            .map(|l| l.weight.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn ordering_invariant_after_every_epoch() {
        let (mut model, cal, profile) = calibrated_fixture(33);
        let log = finetune(
            &mut model,
            &cal,
            &profile,
            &FinetuneConfig { epochs: 6, ..FinetuneConfig::default() },
        )
        .unwrap();
        for e in &log.epochs {
            for p in e.params.values() {
                QuantParams::piecewise_act(p.l_a, p.u_a, p.bp, 4).validate().unwrap();
            }
        }
    }

    #[test]
    fn finetune_is_bitwise_deterministic() {
        let run = || {
            let (mut model, cal, profile) = calibrated_fixture(34);
            finetune(&mut model, &cal, &profile, &FinetuneConfig::default()).unwrap();
            model
                .attachments()
                .values()
                .flat_map(|a| {
                    let q = a.activation_quantizer.unwrap();
                    let w = a.weight_quantizer.unwrap();
                    [q.l_a.to_bits(), q.u_a.to_bits(), q.bp.to_bits(), w.u_w.to_bits()]
                })
                .collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ten_epochs_do_not_worsen_the_loss() {
        let (mut model, cal, profile) = calibrated_fixture(35);
        let before = mean_losses(&model, &cal, &profile, 5.0, 2).unwrap().2;
        finetune(&mut model, &cal, &profile, &FinetuneConfig::default()).unwrap();
        let after = mean_losses(&model, &cal, &profile, 5.0, 2).unwrap().2;
        assert!(after <= before, "L_all rose from {before} to {after}");
    }

    #[test]
    fn finetune_requires_calibrated_params() {
        let mut model = SrModel::new(
            SrConfig { scale: 2, channels: 8, n_blocks: 1, residual_scale: 1.0 },
            9,
        )
        .unwrap();
        model
            .attach_quantizers(AttachPlan {
                act_kind: QuantKind::PiecewiseAct,
                bits_w: 4,
                bits_a: 4,
                policy: FirstLastPolicy::EightBit,
            })
            .unwrap();
        let cal = CalibrationSet::new(
            vec![Tensor::filled([1, 3, 8, 8], 0.5).unwrap()],
            1,
        )
        .unwrap();
        let profile = SensitivityProfile::uniform(&["head.0".to_string()]).unwrap();
        assert!(matches!(
            finetune(&mut model, &cal, &profile, &FinetuneConfig::default()),
            Err(CoreError::UninitializedQuant { .. })
        ));
    }
}
