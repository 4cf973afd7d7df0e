//! EDSR-style super-resolution network: named conv layers, residual body,
//! pixel-shuffle tail, per-layer quantizer attachment points, and forward
//! execution in full precision or fake-quantized mode.

mod io;
mod train;

pub use io::{load_model, save_model, MODEL_VERSION};
pub use train::{train_fp, TrainFpConfig};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use plq_tensor::{add, conv2d, pixel_shuffle, relu, scalar_mul, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::quant::{
    fake_quant_piecewise, fake_quant_sym_weight, fake_quant_uniform, QuantKind, QuantParams,
};

/// One conv layer (stride 1). Weight is Cout×Cin×3×3, bias 1×Cout×1×1.
#[derive(Clone)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

/// Quantizer attachment point of one layer. Parameters stay `None` until
/// calibration fills them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantAttachment {
    pub bits_w: u8,
    pub bits_a: u8,
    pub act_kind: QuantKind,
    pub weight_quantizer: Option<QuantParams>,
    pub activation_quantizer: Option<QuantParams>,
}

/// How the first (head) and last (final tail conv) layers are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstLastPolicy {
    /// Quantize, but at 8-bit weights and activations.
    EightBit,
    /// No quantizer attachment at all.
    Exclude,
    /// Same bit widths as every other layer.
    SameBits,
}

#[derive(Clone, Copy, Debug)]
pub struct AttachPlan {
    pub act_kind: QuantKind,
    pub bits_w: u8,
    pub bits_a: u8,
    pub policy: FirstLastPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    FullPrecision,
    Quantized,
}

/// Scalar parameter tensors used in a quantized forward. The finetuner puts
/// tape-watched tensors here; by default they are constants read from the
/// stored [`QuantParams`].
#[derive(Clone)]
pub struct ParamTensors {
    pub u_w: Option<Tensor>,
    pub l_a: Option<Tensor>,
    pub u_a: Option<Tensor>,
    pub bp: Option<Tensor>,
}

pub type ParamOverlay = BTreeMap<String, ParamTensors>;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SrConfig {
    pub scale: usize,
    pub channels: usize,
    pub n_blocks: usize,
    pub residual_scale: f32,
}

impl Default for SrConfig {
    fn default() -> Self {
        // desk-scale default; the paper-scale 16×64×4 stays constructible
        SrConfig { scale: 2, channels: 16, n_blocks: 4, residual_scale: 1.0 }
    }
}

pub(crate) struct LayerSpec {
    pub(crate) name: String,
    pub(crate) cin: usize,
    pub(crate) cout: usize,
}

pub(crate) fn layer_specs(cfg: &SrConfig) -> Vec<LayerSpec> {
    let c = cfg.channels;
    let mut specs = vec![LayerSpec { name: "head.0".into(), cin: 3, cout: c }];
    for k in 0..cfg.n_blocks {
        specs.push(LayerSpec { name: format!("body.{k}.conv1"), cin: c, cout: c });
        specs.push(LayerSpec { name: format!("body.{k}.conv2"), cin: c, cout: c });
    }
    let stages = if cfg.scale == 4 { 2 } else { 1 };
    for s in 0..stages {
        specs.push(LayerSpec { name: format!("tail.{s}"), cin: c, cout: 4 * c });
    }
    specs.push(LayerSpec { name: format!("tail.{stages}"), cin: c, cout: 3 });
    specs
}

/// EDSR-style SR model with a named-layer registry in execution order.
#[derive(Clone)]
pub struct SrModel {
    pub config: SrConfig,
    layers: Vec<ConvLayer>,
    attachments: BTreeMap<String, QuantAttachment>,
}

impl SrModel {
    /// Builds a model with seeded uniform init (±1/sqrt(fan_in)).
    pub fn new(config: SrConfig, seed: u64) -> Result<Self> {
        if config.scale != 2 && config.scale != 4 {
            return Err(CoreError::Validation {
                detail: format!("scale must be 2 or 4, got {}", config.scale),
            });
        }
        if config.channels == 0 || config.n_blocks == 0 {
            return Err(CoreError::Validation {
                detail: "channels and n_blocks must be ≥ 1".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for spec in layer_specs(&config) {
            let fan_in = spec.cin * 9;
            let k = (1.0 / fan_in as f32).sqrt();
            let wlen = spec.cout * spec.cin * 9;
            let weight: Vec<f32> = (0..wlen).map(|_| rng.gen_range(-k..k)).collect();
            let bias: Vec<f32> = (0..spec.cout).map(|_| rng.gen_range(-k..k)).collect();
            layers.push(ConvLayer {
                name: spec.name,
                weight: Tensor::new([spec.cout, spec.cin, 3, 3], weight)?,
                bias: Tensor::new([1, spec.cout, 1, 1], bias)?,
                padding: 1,
            });
        }
        Ok(SrModel { config, layers, attachments: BTreeMap::new() })
    }

    pub(crate) fn from_parts(
        config: SrConfig,
        layers: Vec<ConvLayer>,
        attachments: BTreeMap<String, QuantAttachment>,
    ) -> Self {
        SrModel { config, layers, attachments }
    }

    /// Layer names in execution order.
    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn layer(&self, name: &str) -> Option<&ConvLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub(crate) fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub(crate) fn set_layer_params(&mut self, index: usize, weight: Tensor, bias: Tensor) {
        self.layers[index].weight = weight;
        self.layers[index].bias = bias;
    }

    pub fn first_layer_name(&self) -> &str {
        &self.layers[0].name
    }

    pub fn last_layer_name(&self) -> &str {
        &self.layers[self.layers.len() - 1].name
    }

    pub fn attachments(&self) -> &BTreeMap<String, QuantAttachment> {
        &self.attachments
    }

    pub fn attachment_mut(&mut self, name: &str) -> Option<&mut QuantAttachment> {
        self.attachments.get_mut(name)
    }

    pub fn clear_attachments(&mut self) {
        self.attachments.clear();
    }

    /// Attaches quantizers to every layer per the first/last policy.
    pub fn attach_quantizers(&mut self, plan: AttachPlan) -> Result<()> {
        if plan.act_kind == QuantKind::SymUniformWeight {
            return Err(CoreError::Validation {
                detail: "activation quantizer kind must be uniform or piecewise".into(),
            });
        }
        let min_bits = if plan.act_kind == QuantKind::PiecewiseAct { 3 } else { 2 };
        if plan.bits_a < min_bits || plan.bits_w < 2 {
            return Err(CoreError::Validation {
                detail: format!(
                    "bit widths W{}A{} too small for the chosen quantizers",
                    plan.bits_w, plan.bits_a
                ),
            });
        }
        self.attachments.clear();
        let first = self.first_layer_name().to_string();
        let last = self.last_layer_name().to_string();
        for layer in &self.layers {
            let is_edge = layer.name == first || layer.name == last;
            let (bits_w, bits_a) = if is_edge {
                match plan.policy {
                    FirstLastPolicy::Exclude => continue,
                    FirstLastPolicy::EightBit => (8, 8),
                    FirstLastPolicy::SameBits => (plan.bits_w, plan.bits_a),
                }
            } else {
                (plan.bits_w, plan.bits_a)
            };
            self.attachments.insert(
                layer.name.clone(),
                QuantAttachment {
                    bits_w,
                    bits_a,
                    act_kind: plan.act_kind,
                    weight_quantizer: None,
                    activation_quantizer: None,
                },
            );
        }
        Ok(())
    }

    /// Attaches an activation-only quantizer to a single layer (sweep tool).
    pub fn attach_single_activation(
        &mut self,
        name: &str,
        act_kind: QuantKind,
        bits_a: u8,
    ) -> Result<()> {
        if self.layer(name).is_none() {
            return Err(CoreError::Validation { detail: format!("no layer named {name:?}") });
        }
        self.attachments.clear();
        self.attachments.insert(
            name.to_string(),
            QuantAttachment {
                bits_w: 32,
                bits_a,
                act_kind,
                weight_quantizer: None,
                activation_quantizer: None,
            },
        );
        Ok(())
    }

    fn validate_input(&self, input: &Tensor) -> Result<()> {
        let [_, c, h, w] = input.shape();
        if c != 3 {
            return Err(CoreError::Validation {
                detail: format!("input must be N×3×H×W, got {:?}", input.shape()),
            });
        }
        if h < 3 || w < 3 {
            return Err(CoreError::Validation {
                detail: format!("input {h}×{w} smaller than the conv kernel"),
            });
        }
        Ok(())
    }

    /// Shared structural walk. `weights_for` chooses the weights each conv
    /// uses; `post_conv` transforms each named conv output (fake-quant,
    /// clipping, capture). Block layout: conv1 → act → relu → conv2 → act →
    /// ×residual_scale → +skip, with a global skip from head to tail.
    fn run(
        &self,
        input: &Tensor,
        weights_for: &mut dyn FnMut(&ConvLayer) -> Result<(Tensor, Tensor)>,
        post_conv: &mut dyn FnMut(&ConvLayer, Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        self.validate_input(input)?;
        let mut idx = 0usize;
        let mut conv_step = |x: &Tensor, layers: &[ConvLayer], idx: &mut usize| -> Result<Tensor> {
            let layer = &layers[*idx];
            *idx += 1;
            let (w, b) = weights_for(layer)?;
            let out = conv2d(x, &w, &b, 1, layer.padding)?;
            post_conv(layer, out)
        };

        let head_out = conv_step(input, &self.layers, &mut idx)?;
        let mut x = head_out.clone();
        for _ in 0..self.config.n_blocks {
            let h = conv_step(&x, &self.layers, &mut idx)?;
            let h = relu(&h)?;
            let h = conv_step(&h, &self.layers, &mut idx)?;
            let h = scalar_mul(&h, self.config.residual_scale)?;
            x = add(&h, &x)?;
        }
        x = add(&x, &head_out)?;
        let stages = if self.config.scale == 4 { 2 } else { 1 };
        for _ in 0..stages {
            let up = conv_step(&x, &self.layers, &mut idx)?;
            x = pixel_shuffle(&up, 2)?;
        }
        conv_step(&x, &self.layers, &mut idx)
    }

    /// Forward pass. In quantized mode each attached layer's weights pass
    /// through the symmetric weight fake-quant and its conv output through
    /// the activation fake-quant; captured features are post-quantization.
    pub fn forward(
        &self,
        input: &Tensor,
        mode: ForwardMode,
        capture: Option<&BTreeSet<String>>,
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        match mode {
            ForwardMode::FullPrecision => self.forward_fp(input, capture),
            ForwardMode::Quantized => {
                let overlay = self.default_overlay()?;
                self.forward_quantized_overlay(input, &overlay, capture)
            }
        }
    }

    fn forward_fp(
        &self,
        input: &Tensor,
        capture: Option<&BTreeSet<String>>,
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let mut captured = BTreeMap::new();
        let out = self.run(
            input,
            &mut |layer| Ok((layer.weight.clone(), layer.bias.clone())),
            &mut |layer, out| {
                if capture.is_some_and(|set| set.contains(&layer.name)) {
                    captured.insert(layer.name.clone(), out.clone());
                }
                Ok(out)
            },
        )?;
        Ok((out, captured))
    }

    /// Builds constant parameter tensors from the stored QuantParams.
    pub fn default_overlay(&self) -> Result<ParamOverlay> {
        let mut overlay = ParamOverlay::new();
        for (name, att) in &self.attachments {
            let mut pt =
                ParamTensors { u_w: None, l_a: None, u_a: None, bp: None };
            if let Some(wq) = &att.weight_quantizer {
                pt.u_w = Some(Tensor::scalar(wq.u_w)?);
            }
            if let Some(aq) = &att.activation_quantizer {
                pt.l_a = Some(Tensor::scalar(aq.l_a)?);
                pt.u_a = Some(Tensor::scalar(aq.u_a)?);
                if aq.kind == QuantKind::PiecewiseAct {
                    pt.bp = Some(Tensor::scalar(aq.bp)?);
                }
            }
            overlay.insert(name.clone(), pt);
        }
        Ok(overlay)
    }

    /// Quantized forward with explicit parameter tensors (the finetuner
    /// passes tape-watched scalars for the active group).
    pub fn forward_quantized_overlay(
        &self,
        input: &Tensor,
        overlay: &ParamOverlay,
        capture: Option<&BTreeSet<String>>,
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let mut captured = BTreeMap::new();
        let out = self.run(
            input,
            &mut |layer| {
                let Some(att) = self.attachments.get(&layer.name) else {
                    return Ok((layer.weight.clone(), layer.bias.clone()));
                };
                let missing = || CoreError::UninitializedQuant { layer: layer.name.clone() };
                if att.weight_quantizer.is_none() {
                    return Err(missing());
                }
                let u_w = overlay
                    .get(&layer.name)
                    .and_then(|pt| pt.u_w.clone())
                    .ok_or_else(missing)?;
                let wq = fake_quant_sym_weight(&layer.weight, &u_w, att.bits_w)?;
                Ok((wq, layer.bias.clone()))
            },
            &mut |layer, out| {
                let Some(att) = self.attachments.get(&layer.name) else {
                    if capture.is_some_and(|set| set.contains(&layer.name)) {
                        captured.insert(layer.name.clone(), out.clone());
                    }
                    return Ok(out);
                };
                let missing = || CoreError::UninitializedQuant { layer: layer.name.clone() };
                let aq = att.activation_quantizer.as_ref().ok_or_else(missing)?;
                let pt = overlay.get(&layer.name).ok_or_else(missing)?;
                let l_a = pt.l_a.clone().ok_or_else(missing)?;
                let u_a = pt.u_a.clone().ok_or_else(missing)?;
                let q = match aq.kind {
                    QuantKind::PiecewiseAct => {
                        let bp = pt.bp.clone().ok_or_else(missing)?;
                        fake_quant_piecewise(&out, &l_a, &u_a, &bp, att.bits_a)?
                    }
                    QuantKind::AsymUniformAct => {
                        fake_quant_uniform(&out, &l_a, &u_a, att.bits_a)?
                    }
                    QuantKind::SymUniformWeight => {
                        return Err(CoreError::Validation {
                            detail: format!("layer {} has a weight kind as activation", layer.name),
                        })
                    }
                };
                if capture.is_some_and(|set| set.contains(&layer.name)) {
                    captured.insert(layer.name.clone(), q.clone());
                }
                Ok(q)
            },
        )?;
        Ok((out, captured))
    }

    /// Full-precision forward where every named conv output passes through
    /// `hook` (statistics collection, outlier clipping).
    pub fn forward_fp_hooked(
        &self,
        input: &Tensor,
        hook: &mut dyn FnMut(&str, Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        self.run(
            input,
            &mut |layer| Ok((layer.weight.clone(), layer.bias.clone())),
            &mut |layer, out| hook(&layer.name, out),
        )
    }
}
