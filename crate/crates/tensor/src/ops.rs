//! Elementwise ops, pixel shuffle, and differentiable reductions.
//!
//! Reductions accumulate sequentially in row-major order so results are
//! bitwise reproducible regardless of thread count.

use crate::error::{Result, TensorError};
use crate::tape::record_op;
use crate::tensor::Tensor;

const SCALAR: [usize; 4] = [1, 1, 1, 1];

/// Elementwise max(x, 0). Backward passes gradient only where x > 0.
pub fn relu(input: &Tensor) -> Result<Tensor> {
    let out: Vec<f32> = input.data().iter().map(|&v| v.max(0.0)).collect();
    let x = input.detach();
    record_op(
        &[input],
        input.shape(),
        out,
        Box::new(move |g, _| {
            let gx: Vec<f32> = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            Ok(vec![Some(Tensor::from_parts(x.shape(), gx))])
        }),
        "relu",
    )
}

/// Elementwise addition of equal-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op: "add", left: a.shape(), right: b.shape() });
    }
    let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    record_op(
        &[a, b],
        a.shape(),
        out,
        Box::new(move |g, needs| {
            let ga = needs[0].then(|| g.detach());
            let gb = needs[1].then(|| g.detach());
            Ok(vec![ga, gb])
        }),
        "add",
    )
}

/// Multiplies every element by a fixed scalar.
pub fn scalar_mul(input: &Tensor, s: f32) -> Result<Tensor> {
    if !s.is_finite() {
        return Err(TensorError::BadScalar { op: "scalar_mul", detail: format!("scale {s}") });
    }
    let out: Vec<f32> = input.data().iter().map(|v| v * s).collect();
    record_op(
        &[input],
        input.shape(),
        out,
        Box::new(move |g, _| {
            let gx: Vec<f32> = g.data().iter().map(|v| v * s).collect();
            Ok(vec![Some(Tensor::from_parts(g.shape(), gx))])
        }),
        "scalar_mul",
    )
}

/// Divides every element by a 1-element tensor; differentiable in both
/// arguments (used for feature-map L2 normalization).
pub fn div_scalar(input: &Tensor, denom: &Tensor) -> Result<Tensor> {
    let d = denom.scalar_value().map_err(|_| TensorError::BadShape {
        op: "div_scalar",
        shape: denom.shape(),
        detail: "denominator must be a 1-element tensor".into(),
    })?;
    if d == 0.0 {
        return Err(TensorError::BadScalar { op: "div_scalar", detail: "division by zero".into() });
    }
    let out: Vec<f32> = input.data().iter().map(|v| v / d).collect();
    let x = input.detach();
    record_op(
        &[input, denom],
        input.shape(),
        out,
        Box::new(move |g, needs| {
            let gx = needs[0].then(|| {
                let v: Vec<f32> = g.data().iter().map(|gv| gv / d).collect();
                Tensor::from_parts(x.shape(), v)
            });
            let gd = needs[1].then(|| {
                let mut acc = 0.0f32;
                for (gv, xv) in g.data().iter().zip(x.data()) {
                    acc += gv * xv;
                }
                Tensor::from_parts(SCALAR, vec![-acc / (d * d)])
            });
            Ok(vec![gx, gd])
        }),
        "div_scalar",
    )
}

/// Extracts sample `index` of the batch as a 1×C×H×W tensor.
pub fn batch_slice(input: &Tensor, index: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if index >= n {
        return Err(TensorError::BadShape {
            op: "batch_slice",
            shape: input.shape(),
            detail: format!("batch index {index} out of range"),
        });
    }
    let per = c * h * w;
    let out = input.data()[index * per..(index + 1) * per].to_vec();
    let in_shape = input.shape();
    record_op(
        &[input],
        [1, c, h, w],
        out,
        Box::new(move |g, _| {
            let mut gx = vec![0.0f32; n * per];
            gx[index * per..(index + 1) * per].copy_from_slice(g.data());
            Ok(vec![Some(Tensor::from_parts(in_shape, gx))])
        }),
        "batch_slice",
    )
}

/// Channel-to-space rearrangement: N×(C·r²)×H×W → N×C×(H·r)×(W·r).
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c_in, h, w] = input.shape();
    if r == 0 || c_in % (r * r) != 0 {
        return Err(TensorError::BadShape {
            op: "pixel_shuffle",
            shape: input.shape(),
            detail: format!("channels {c_in} not divisible by r²={}", r * r),
        });
    }
    let c_out = c_in / (r * r);
    let out_shape = [n, c_out, h * r, w * r];
    let mut out = vec![0.0f32; input.numel()];
    shuffle_into(input.data(), &mut out, n, c_out, h, w, r, false);
    let in_shape = input.shape();
    record_op(
        &[input],
        out_shape,
        out,
        Box::new(move |g, _| {
            let mut gx = vec![0.0f32; g.numel()];
            shuffle_into(g.data(), &mut gx, n, c_out, h, w, r, true);
            Ok(vec![Some(Tensor::from_parts(in_shape, gx))])
        }),
        "pixel_shuffle",
    )
}

/// Forward (`inverse=false`): out[n][c][h·r+i][w·r+j] = in[n][c·r²+i·r+j][h][w].
/// With `inverse=true` the assignment direction flips.
fn shuffle_into(
    src: &[f32],
    dst: &mut [f32],
    n: usize,
    c_out: usize,
    h: usize,
    w: usize,
    r: usize,
    inverse: bool,
) {
    let c_in = c_out * r * r;
    for b in 0..n {
        for c in 0..c_out {
            for i in 0..r {
                for j in 0..r {
                    let ci = c * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let in_idx = ((b * c_in + ci) * h + y) * w + x;
                            let out_idx =
                                ((b * c_out + c) * (h * r) + y * r + i) * (w * r) + x * r + j;
                            if inverse {
                                dst[in_idx] = src[out_idx];
                            } else {
                                dst[out_idx] = src[in_idx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Mean over all elements.
pub fn mean(input: &Tensor) -> Result<Tensor> {
    let n = input.numel();
    let mut acc = 0.0f32;
    for v in input.data() {
        acc += v;
    }
    let in_shape = input.shape();
    record_op(
        &[input],
        SCALAR,
        vec![acc / n as f32],
        Box::new(move |g, _| {
            let gv = g.data()[0] / n as f32;
            Ok(vec![Some(Tensor::from_parts(in_shape, vec![gv; n]))])
        }),
        "mean",
    )
}

/// Population standard deviation over all elements (divide by n).
pub fn std_dev(input: &Tensor) -> Result<Tensor> {
    let n = input.numel();
    if n < 2 {
        return Err(TensorError::TooFewElements { op: "std", needed: 2, got: n });
    }
    let mut sum = 0.0f32;
    for v in input.data() {
        sum += v;
    }
    let mu = sum / n as f32;
    let mut var = 0.0f32;
    for v in input.data() {
        let d = v - mu;
        var += d * d;
    }
    let sd = (var / n as f32).sqrt();
    let x = input.detach();
    record_op(
        &[input],
        SCALAR,
        vec![sd],
        Box::new(move |g, _| {
            // d sd / d x_i = (x_i - mu) / (n * sd); zero subgradient at sd = 0.
            let gv = g.data()[0];
            let data = if sd == 0.0 {
                vec![0.0; n]
            } else {
                x.data().iter().map(|&v| gv * (v - mu) / (n as f32 * sd)).collect()
            };
            Ok(vec![Some(Tensor::from_parts(x.shape(), data))])
        }),
        "std",
    )
}

/// Mean absolute difference over all elements. The subgradient of |·| at
/// zero is taken as 0.
pub fn l1_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "l1_diff",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let n = a.numel();
    let mut acc = 0.0f32;
    for (x, y) in a.data().iter().zip(b.data()) {
        acc += (x - y).abs();
    }
    let (ad, bd) = (a.detach(), b.detach());
    record_op(
        &[a, b],
        SCALAR,
        vec![acc / n as f32],
        Box::new(move |g, needs| {
            let gv = g.data()[0] / n as f32;
            let signs = || -> Vec<f32> {
                ad.data()
                    .iter()
                    .zip(bd.data())
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            gv
                        } else if d < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect()
            };
            let ga = needs[0].then(|| Tensor::from_parts(ad.shape(), signs()));
            let gb = needs[1].then(|| {
                let neg: Vec<f32> = signs().iter().map(|v| -v).collect();
                Tensor::from_parts(bd.shape(), neg)
            });
            Ok(vec![ga, gb])
        }),
        "l1_diff",
    )
}

/// Euclidean norm over all elements: sqrt(Σ x²).
pub fn l2_norm(input: &Tensor) -> Result<Tensor> {
    let mut acc = 0.0f32;
    for v in input.data() {
        acc += v * v;
    }
    let norm = acc.sqrt();
    let x = input.detach();
    record_op(
        &[input],
        SCALAR,
        vec![norm],
        Box::new(move |g, _| {
            let gv = g.data()[0];
            let data = if norm == 0.0 {
                vec![0.0; x.numel()]
            } else {
                x.data().iter().map(|&v| gv * v / norm).collect()
            };
            Ok(vec![Some(Tensor::from_parts(x.shape(), data))])
        }),
        "l2_norm",
    )
}

/// Euclidean distance between equal-shaped tensors: sqrt(Σ (a−b)²).
pub fn l2_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "l2_diff",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut acc = 0.0f32;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        acc += d * d;
    }
    let dist = acc.sqrt();
    let (ad, bd) = (a.detach(), b.detach());
    record_op(
        &[a, b],
        SCALAR,
        vec![dist],
        Box::new(move |g, needs| {
            let gv = g.data()[0];
            let diff_scaled = |sign: f32| -> Vec<f32> {
                if dist == 0.0 {
                    vec![0.0; ad.numel()]
                } else {
                    ad.data()
                        .iter()
                        .zip(bd.data())
                        .map(|(x, y)| sign * gv * (x - y) / dist)
                        .collect()
                }
            };
            let ga = needs[0].then(|| Tensor::from_parts(ad.shape(), diff_scaled(1.0)));
            let gb = needs[1].then(|| Tensor::from_parts(bd.shape(), diff_scaled(-1.0)));
            Ok(vec![ga, gb])
        }),
        "l2_diff",
    )
}
