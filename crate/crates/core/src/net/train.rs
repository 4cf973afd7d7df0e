//! Full-precision trainer producing the reference network the PTQ pipeline
//! quantizes. Adam on L1 reconstruction loss over (LR, HR) pairs.

use plq_tensor::{l1_diff, GradTape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SrDataset;
use crate::error::{CoreError, Result};
use crate::net::SrModel;
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug)]
pub struct TrainFpConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TrainFpConfig {
    fn default() -> Self {
        TrainFpConfig { epochs: 50, batch_size: 8, lr: 1e-3, seed: 0 }
    }
}

/// Trains conv weights and biases in place; returns the per-step L1 losses.
pub fn train_fp(model: &mut SrModel, data: &SrDataset, cfg: &TrainFpConfig) -> Result<Vec<f32>> {
    if data.scale != model.config.scale {
        return Err(CoreError::ScaleMismatch {
            detail: format!(
                "model scale {} vs dataset scale {}",
                model.config.scale, data.scale
            ),
        });
    }
    if data.pairs.is_empty() {
        return Err(CoreError::Validation { detail: "empty training dataset".into() });
    }
    let batch_size = cfg.batch_size.max(1);
    let n_layers = model.layers().len();

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let slots: Vec<(usize, usize)> = (0..n_layers)
        .map(|i| {
            let w = adam.register(model.layers()[i].weight.numel());
            let b = adam.register(model.layers()[i].bias.numel());
            (w, b)
        })
        .collect();

    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..data.pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let lr_batch: Vec<&Tensor> = chunk.iter().map(|&i| &data.pairs[i].lr).collect();
            let hr_batch: Vec<&Tensor> = chunk.iter().map(|&i| &data.pairs[i].hr).collect();
            let lr_in = Tensor::concat_batch(&lr_batch)?;
            let hr_ref = Tensor::concat_batch(&hr_batch)?;

            let tape = GradTape::new();
            let watched: Vec<(Tensor, Tensor)> = model
                .layers()
                .iter()
                .map(|l| (tape.watch(&l.weight), tape.watch(&l.bias)))
                .collect();
            let mut cursor = 0usize;
            let pred = model.run(
                &lr_in,
                &mut |_layer| {
                    let (w, b) = &watched[cursor];
                    cursor += 1;
                    Ok((w.clone(), b.clone()))
                },
                &mut |_, out| Ok(out),
            )?;
            let loss = l1_diff(&pred, &hr_ref)?;
            losses.push(loss.scalar_value()?);
            let grads = tape.backward(&loss)?;

            for (i, (w, b)) in watched.iter().enumerate() {
                let gw = grads.get(w).expect("watched weight has gradient");
                let gb = grads.get(b).expect("watched bias has gradient");
                let mut wdata = w.data().to_vec();
                let mut bdata = b.data().to_vec();
                adam.step(slots[i].0, &mut wdata, gw.data());
                adam.step(slots[i].1, &mut bdata, gb.data());
                model.set_layer_params(
                    i,
                    Tensor::new(w.shape(), wdata)?,
                    Tensor::new(b.shape(), bdata)?,
                );
            }
        }
    }
    Ok(losses)
}
