//! Fake quantizers: symmetric uniform for weights, asymmetric uniform for
//! activations, and the dual-region piecewise linear quantizer.
//!
//! All three exist in two forms: explicit quantize/dequantize (integer codes
//! in and out, used by tests and analysis) and a fused fake-quant op that is
//! differentiable on the gradient tape. Tensor inputs get straight-through
//! gradients; the learnable scalars (`l_a`, `u_a`, `bp`, `u_w`) get
//! fixed-code gradients (the rounded code is treated as a constant and the
//! dequantization expression is differentiated).
//!
//! Element math runs in f64 and is truncated to f32 once per element, which
//! keeps idempotence and the code round trips exact.

use serde::{Deserialize, Serialize};

use plq_tensor::{apply_custom, CustomOp, Tensor};

use crate::error::{CoreError, Result};

/// Minimum gap kept between region boundaries by the ordering projection.
pub const ORDERING_EPS: f32 = 1e-4;

/// Quantizer family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    SymUniformWeight,
    AsymUniformAct,
    PiecewiseAct,
}

/// Per-layer quantization state; the learnable object of the finetuner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub kind: QuantKind,
    pub bits: u8,
    /// Lower activation bound.
    pub l_a: f32,
    /// Upper activation bound.
    pub u_a: f32,
    /// Breakpoint separating the dense region [−bp, bp] from the outliers.
    pub bp: f32,
    /// Symmetric weight bound.
    pub u_w: f32,
}

impl QuantParams {
    pub fn sym_weight(u_w: f32, bits: u8) -> Self {
        QuantParams { kind: QuantKind::SymUniformWeight, bits, l_a: 0.0, u_a: 0.0, bp: 0.0, u_w }
    }

    pub fn asym_act(l_a: f32, u_a: f32, bits: u8) -> Self {
        QuantParams { kind: QuantKind::AsymUniformAct, bits, l_a, u_a, bp: 0.0, u_w: 0.0 }
    }

    pub fn piecewise_act(l_a: f32, u_a: f32, bp: f32, bits: u8) -> Self {
        QuantParams { kind: QuantKind::PiecewiseAct, bits, l_a, u_a, bp, u_w: 0.0 }
    }

    /// Which scalar fields are learnable for this kind.
    pub fn learnable(&self) -> LearnableFlags {
        match self.kind {
            QuantKind::SymUniformWeight => {
                LearnableFlags { l_a: false, u_a: false, bp: false, u_w: true }
            }
            QuantKind::AsymUniformAct => {
                LearnableFlags { l_a: true, u_a: true, bp: false, u_w: false }
            }
            QuantKind::PiecewiseAct => {
                LearnableFlags { l_a: true, u_a: true, bp: true, u_w: false }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(CoreError::BadQuantParams { detail });
        match self.kind {
            QuantKind::SymUniformWeight => {
                if self.bits < 2 || self.bits > 32 {
                    return bad(format!("weight bits {} outside 2..=32", self.bits));
                }
                if !(self.u_w > 0.0) {
                    return bad(format!("u_w must be > 0, got {}", self.u_w));
                }
            }
            QuantKind::AsymUniformAct => {
                if self.bits < 2 || self.bits > 32 {
                    return bad(format!("activation bits {} outside 2..=32", self.bits));
                }
                if !(self.l_a < self.u_a) {
                    return bad(format!("need l_a < u_a, got [{}, {}]", self.l_a, self.u_a));
                }
            }
            QuantKind::PiecewiseAct => {
                if self.bits < 3 || self.bits > 32 {
                    return bad(format!("piecewise bits {} outside 3..=32", self.bits));
                }
                if !(self.l_a <= -self.bp && self.bp > 0.0 && self.bp <= self.u_a) {
                    return bad(format!(
                        "ordering l_a ≤ −bp < 0 < bp ≤ u_a violated: l_a={}, bp={}, u_a={}",
                        self.l_a, self.bp, self.u_a
                    ));
                }
                let min_span = ORDERING_EPS * 0.5;
                let neg_span = -self.bp - self.l_a;
                let pos_span = self.u_a - self.bp;
                if neg_span < min_span || pos_span < min_span || self.bp < min_span {
                    return bad(format!(
                        "degenerate region span: neg={neg_span}, pos={pos_span}, dense half={}",
                        self.bp
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LearnableFlags {
    pub l_a: bool,
    pub u_a: bool,
    pub bp: bool,
    pub u_w: bool,
}

/// Parameter groups of the staged finetuning schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    WeightBound,
    ActBounds,
    Breakpoint,
}

/// Post-step projection that keeps region spans nondegenerate. Only the
/// active group's fields may move, so frozen groups stay bitwise intact.
pub fn project_group(p: &mut QuantParams, group: ParamGroup) {
    let eps = ORDERING_EPS;
    match group {
        ParamGroup::WeightBound => {
            if p.kind == QuantKind::SymUniformWeight && p.u_w < eps {
                p.u_w = eps;
            }
        }
        ParamGroup::ActBounds => match p.kind {
            QuantKind::AsymUniformAct => {
                if p.u_a < p.l_a + eps {
                    p.u_a = p.l_a + eps;
                }
            }
            QuantKind::PiecewiseAct => {
                if p.l_a > -p.bp - eps {
                    p.l_a = -p.bp - eps;
                }
                if p.u_a < p.bp + eps {
                    p.u_a = p.bp + eps;
                }
            }
            QuantKind::SymUniformWeight => {}
        },
        ParamGroup::Breakpoint => {
            if p.kind == QuantKind::PiecewiseAct {
                let hi = (-p.l_a).min(p.u_a) - eps;
                p.bp = p.bp.clamp(eps, hi.max(eps));
            }
        }
    }
}

/// Calibration-time projection: breakpoint kept positive, bounds pushed
/// outward so every region has at least ε of span (one-sided distributions
/// leave a near-empty outlier region rather than a second code path).
pub fn project_calibrated(p: &mut QuantParams) {
    match p.kind {
        QuantKind::PiecewiseAct => {
            if p.bp < ORDERING_EPS {
                p.bp = ORDERING_EPS;
            }
            project_group(p, ParamGroup::ActBounds);
        }
        QuantKind::AsymUniformAct => project_group(p, ParamGroup::ActBounds),
        QuantKind::SymUniformWeight => project_group(p, ParamGroup::WeightBound),
    }
}

// ---------------------------------------------------------------------------
// scalar kernels (f64)

fn levels(bits: u8) -> f64 {
    ((1u64 << bits) - 1) as f64
}

fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Eq.-1 style code for the asymmetric uniform quantizer.
pub fn uniform_encode(x: f32, l: f32, u: f32, bits: u8) -> i64 {
    let (x, l, u) = (x as f64, l as f64, u as f64);
    let t = x.clamp(l, u);
    round_half_away((t - l) / (u - l) * levels(bits)) as i64
}

pub fn uniform_decode(code: i64, l: f32, u: f32, bits: u8) -> f32 {
    let (l, u) = (l as f64, u as f64);
    (code as f64 * (u - l) / levels(bits) + l) as f32
}

fn sym_encode(w: f32, u_w: f32, bits: u8) -> i64 {
    let (w, u_w) = (w as f64, u_w as f64);
    let half = ((1u64 << (bits - 1)) - 1) as f64;
    let t = w.clamp(-u_w, u_w);
    round_half_away(t / u_w * half) as i64
}

fn sym_decode(code: i64, u_w: f32, bits: u8) -> f32 {
    let half = ((1u64 << (bits - 1)) - 1) as f64;
    (code as f64 * u_w as f64 / half) as f32
}

/// Region of the piecewise quantizer an input falls into.
///
/// The dense interval is open at ±bp: the boundary points belong to the
/// outlier regions, whose code grids contain ±bp exactly. This makes the
/// fused fake-quant idempotent and monotone across the seams, which the
/// closed dense interval would break at x = ±bp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Dense,
    NegOutlier,
    PosOutlier,
}

/// Integer code together with the region that owns it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizedCode {
    pub region: Region,
    pub code: i64,
}

pub fn region_of(x: f32, bp: f32) -> Region {
    if x >= bp {
        Region::PosOutlier
    } else if x <= -bp {
        Region::NegOutlier
    } else {
        Region::Dense
    }
}

fn dense_levels(bits: u8) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

fn outlier_levels(bits: u8) -> f64 {
    ((1u64 << (bits - 2)) - 1) as f64
}

pub fn piecewise_encode(x: f32, p: &QuantParams) -> QuantizedCode {
    let (xf, l_a, u_a, bp) = (x as f64, p.l_a as f64, p.u_a as f64, p.bp as f64);
    match region_of(x, p.bp) {
        Region::Dense => {
            let t = xf.clamp(-bp, bp);
            let code = round_half_away(t / (2.0 * bp) * dense_levels(p.bits)) as i64;
            QuantizedCode { region: Region::Dense, code }
        }
        Region::NegOutlier => {
            let t = xf.clamp(l_a, -bp);
            let code =
                round_half_away((t - l_a) / (-bp - l_a) * outlier_levels(p.bits)) as i64;
            QuantizedCode { region: Region::NegOutlier, code }
        }
        Region::PosOutlier => {
            let t = xf.clamp(bp, u_a);
            let code = round_half_away((t - bp) / (u_a - bp) * outlier_levels(p.bits)) as i64;
            QuantizedCode { region: Region::PosOutlier, code }
        }
    }
}

pub fn piecewise_decode(c: QuantizedCode, p: &QuantParams) -> f32 {
    let (l_a, u_a, bp) = (p.l_a as f64, p.u_a as f64, p.bp as f64);
    let v = match c.region {
        Region::Dense => c.code as f64 * 2.0 * bp / dense_levels(p.bits),
        Region::NegOutlier => c.code as f64 * (-bp - l_a) / outlier_levels(p.bits) + l_a,
        Region::PosOutlier => c.code as f64 * (u_a - bp) / outlier_levels(p.bits) + bp,
    };
    v as f32
}

fn piecewise_fake(x: f32, p: &QuantParams) -> f32 {
    piecewise_decode(piecewise_encode(x, p), p)
}

/// Fixed-code partial derivatives (∂x_q/∂l_a, ∂x_q/∂u_a, ∂x_q/∂bp) of the
/// piecewise dequantization at one element.
pub fn piecewise_element_grads(x: f32, p: &QuantParams) -> (f64, f64, f64) {
    let c = piecewise_encode(x, p);
    match c.region {
        Region::Dense => (0.0, 0.0, c.code as f64 * 2.0 / dense_levels(p.bits)),
        Region::NegOutlier => {
            let frac = c.code as f64 / outlier_levels(p.bits);
            (1.0 - frac, 0.0, -frac)
        }
        Region::PosOutlier => {
            let frac = c.code as f64 / outlier_levels(p.bits);
            (0.0, frac, 1.0 - frac)
        }
    }
}

// ---------------------------------------------------------------------------
// tensor-level explicit quantize / dequantize

pub fn quant_uniform(x: &Tensor, l: f32, u: f32, bits: u8) -> Result<Vec<i64>> {
    QuantParams::asym_act(l, u, bits).validate()?;
    Ok(x.data().iter().map(|&v| uniform_encode(v, l, u, bits)).collect())
}

pub fn dequant_uniform(
    codes: &[i64],
    l: f32,
    u: f32,
    bits: u8,
    shape: [usize; 4],
) -> Result<Tensor> {
    QuantParams::asym_act(l, u, bits).validate()?;
    let data = codes.iter().map(|&c| uniform_decode(c, l, u, bits)).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn quant_piecewise(x: &Tensor, p: &QuantParams) -> Result<Vec<QuantizedCode>> {
    p.validate()?;
    Ok(x.data().iter().map(|&v| piecewise_encode(v, p)).collect())
}

pub fn dequant_piecewise(
    codes: &[QuantizedCode],
    p: &QuantParams,
    shape: [usize; 4],
) -> Result<Tensor> {
    p.validate()?;
    let data = codes.iter().map(|&c| piecewise_decode(c, p)).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Sums upstream gradients against the fixed-code parameter derivatives.
pub fn piecewise_param_grads(
    x: &Tensor,
    p: &QuantParams,
    upstream: &Tensor,
) -> Result<(f32, f32, f32)> {
    p.validate()?;
    if x.shape() != upstream.shape() {
        return Err(CoreError::Validation {
            detail: format!(
                "upstream shape {:?} must match input {:?}",
                upstream.shape(),
                x.shape()
            ),
        });
    }
    let (mut gl, mut gu, mut gb) = (0.0f64, 0.0f64, 0.0f64);
    for (&v, &g) in x.data().iter().zip(upstream.data()) {
        let (dl, du, db) = piecewise_element_grads(v, p);
        gl += g as f64 * dl;
        gu += g as f64 * du;
        gb += g as f64 * db;
    }
    Ok((gl as f32, gu as f32, gb as f32))
}

// ---------------------------------------------------------------------------
// fused differentiable fake-quant ops

fn scalar_of(t: &Tensor, what: &str) -> Result<f32> {
    t.scalar_value().map_err(|_| CoreError::Validation {
        detail: format!("{what} must be a 1-element tensor, got shape {:?}", t.shape()),
    })
}

struct UniformFakeQuant {
    x: Tensor,
    l: f32,
    u: f32,
    bits: u8,
}

impl CustomOp for UniformFakeQuant {
    fn name(&self) -> &'static str {
        "fake_quant_uniform"
    }

    fn backward(
        &self,
        g: &Tensor,
        needs: &[bool],
    ) -> plq_tensor::Result<Vec<Option<Tensor>>> {
        let lv = levels(self.bits);
        let gx = needs[0].then(|| {
            let data: Vec<f32> = self
                .x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v >= self.l && v <= self.u { gv } else { 0.0 })
                .collect();
            Tensor::new(self.x.shape(), data).expect("finite gradient")
        });
        let mut gl_acc = 0.0f64;
        let mut gu_acc = 0.0f64;
        if needs[1] || needs[2] {
            for (&v, &gv) in self.x.data().iter().zip(g.data()) {
                let code = uniform_encode(v, self.l, self.u, self.bits) as f64;
                let frac = code / lv;
                gl_acc += gv as f64 * (1.0 - frac);
                gu_acc += gv as f64 * frac;
            }
        }
        let gl = needs[1].then(|| Tensor::new([1, 1, 1, 1], vec![gl_acc as f32]).expect("finite gradient"));
        let gu = needs[2].then(|| Tensor::new([1, 1, 1, 1], vec![gu_acc as f32]).expect("finite gradient"));
        Ok(vec![gx, gl, gu])
    }
}

/// Fused uniform fake quantization: dequant(quant(x)) with STE for `x` and
/// fixed-code gradients for the bounds.
pub fn fake_quant_uniform(x: &Tensor, l: &Tensor, u: &Tensor, bits: u8) -> Result<Tensor> {
    let (lv, uv) = (scalar_of(l, "l")?, scalar_of(u, "u")?);
    QuantParams::asym_act(lv, uv, bits).validate()?;
    let out: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| uniform_decode(uniform_encode(v, lv, uv, bits), lv, uv, bits))
        .collect();
    let op = UniformFakeQuant { x: x.detach(), l: lv, u: uv, bits };
    Ok(apply_custom(op, &[x, l, u], x.shape(), out)?)
}

struct SymWeightFakeQuant {
    w: Tensor,
    u_w: f32,
    bits: u8,
}

impl CustomOp for SymWeightFakeQuant {
    fn name(&self) -> &'static str {
        "fake_quant_sym_weight"
    }

    fn backward(
        &self,
        g: &Tensor,
        needs: &[bool],
    ) -> plq_tensor::Result<Vec<Option<Tensor>>> {
        let half = ((1u64 << (self.bits - 1)) - 1) as f64;
        let gw = needs[0].then(|| {
            let data: Vec<f32> = self
                .w
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v.abs() <= self.u_w { gv } else { 0.0 })
                .collect();
            Tensor::new(self.w.shape(), data).expect("finite gradient")
        });
        let gu = needs[1].then(|| {
            // code/half is x_q/u_w at interior points and sign(w) when clipped
            let mut acc = 0.0f64;
            for (&v, &gv) in self.w.data().iter().zip(g.data()) {
                acc += gv as f64 * sym_encode(v, self.u_w, self.bits) as f64 / half;
            }
            Tensor::new([1, 1, 1, 1], vec![acc as f32]).expect("finite gradient")
        });
        Ok(vec![gw, gu])
    }
}

/// Fused symmetric weight fake quantization.
pub fn fake_quant_sym_weight(w: &Tensor, u_w: &Tensor, bits: u8) -> Result<Tensor> {
    let uv = scalar_of(u_w, "u_w")?;
    QuantParams::sym_weight(uv, bits).validate()?;
    let out: Vec<f32> =
        w.data().iter().map(|&v| sym_decode(sym_encode(v, uv, bits), uv, bits)).collect();
    let op = SymWeightFakeQuant { w: w.detach(), u_w: uv, bits };
    Ok(apply_custom(op, &[w, u_w], w.shape(), out)?)
}

struct PiecewiseFakeQuant {
    x: Tensor,
    p: QuantParams,
}

impl CustomOp for PiecewiseFakeQuant {
    fn name(&self) -> &'static str {
        "fake_quant_piecewise"
    }

    fn backward(
        &self,
        g: &Tensor,
        needs: &[bool],
    ) -> plq_tensor::Result<Vec<Option<Tensor>>> {
        let gx = needs[0].then(|| {
            let data: Vec<f32> = self
                .x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v >= self.p.l_a && v <= self.p.u_a { gv } else { 0.0 })
                .collect();
            Tensor::new(self.x.shape(), data).expect("finite gradient")
        });
        let mut acc = (0.0f64, 0.0f64, 0.0f64);
        if needs[1] || needs[2] || needs[3] {
            for (&v, &gv) in self.x.data().iter().zip(g.data()) {
                let (dl, du, db) = piecewise_element_grads(v, &self.p);
                acc.0 += gv as f64 * dl;
                acc.1 += gv as f64 * du;
                acc.2 += gv as f64 * db;
            }
        }
        let gl = needs[1].then(|| Tensor::new([1, 1, 1, 1], vec![acc.0 as f32]).expect("finite gradient"));
        let gu = needs[2].then(|| Tensor::new([1, 1, 1, 1], vec![acc.1 as f32]).expect("finite gradient"));
        let gb = needs[3].then(|| Tensor::new([1, 1, 1, 1], vec![acc.2 as f32]).expect("finite gradient"));
        Ok(vec![gx, gl, gu, gb])
    }
}

/// Fused dual-region fake quantization.
pub fn fake_quant_piecewise(
    x: &Tensor,
    l_a: &Tensor,
    u_a: &Tensor,
    bp: &Tensor,
    bits: u8,
) -> Result<Tensor> {
    let p = QuantParams::piecewise_act(
        scalar_of(l_a, "l_a")?,
        scalar_of(u_a, "u_a")?,
        scalar_of(bp, "bp")?,
        bits,
    );
    p.validate()?;
    let out: Vec<f32> = x.data().iter().map(|&v| piecewise_fake(v, &p)).collect();
    let op = PiecewiseFakeQuant { x: x.detach(), p };
    Ok(apply_custom(op, &[x, l_a, u_a, bp], x.shape(), out)?)
}

/// Fake-quantizes activations with constant (non-learnable) parameters.
pub fn fake_quant_act(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    match p.kind {
        QuantKind::AsymUniformAct => fake_quant_uniform(
            x,
            &Tensor::scalar(p.l_a)?,
            &Tensor::scalar(p.u_a)?,
            p.bits,
        ),
        QuantKind::PiecewiseAct => fake_quant_piecewise(
            x,
            &Tensor::scalar(p.l_a)?,
            &Tensor::scalar(p.u_a)?,
            &Tensor::scalar(p.bp)?,
            p.bits,
        ),
        QuantKind::SymUniformWeight => Err(CoreError::Validation {
            detail: "weight quantizer used on activations".into(),
        }),
    }
}
