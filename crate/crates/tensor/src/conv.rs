//! Direct 2D cross-correlation with bias, plus its backward rules.
//!
//! The kernel loops put the contiguous width axis innermost so the hot loop
//! is a strided saxpy. Parallelism partitions over independent output (or
//! gradient) planes; the reduction order for each element stays fixed, so
//! outputs are bitwise identical at any thread count.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::tape::record_op;
use crate::tensor::Tensor;

/// 2D cross-correlation. `weight` is Cout×Cin×Kh×Kw, `bias` is 1×Cout×1×1.
/// Output spatial dims are floor((H + 2·padding − Kh)/stride) + 1.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [n, cin, h, w] = input.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape(),
            right: weight.shape(),
        });
    }
    if bias.shape() != [1, cout, 1, 1] {
        return Err(TensorError::BadShape {
            op: "conv2d",
            shape: bias.shape(),
            detail: format!("bias must be 1×{cout}×1×1"),
        });
    }
    if stride == 0 {
        return Err(TensorError::BadScalar { op: "conv2d", detail: "stride must be ≥ 1".into() });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(TensorError::BadShape {
            op: "conv2d",
            shape: input.shape(),
            detail: format!("kernel {kh}×{kw} larger than padded input"),
        });
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    let out = forward(
        input.data(),
        weight.data(),
        bias.data(),
        [n, cin, h, w],
        [cout, cin, kh, kw],
        stride,
        padding,
        oh,
        ow,
    );

    let (x, wt) = (input.detach(), weight.detach());
    let bias_shape = bias.shape();
    record_op(
        &[input, weight, bias],
        [n, cout, oh, ow],
        out,
        Box::new(move |g, needs| {
            let gi = needs[0].then(|| {
                let data = grad_input(g.data(), wt.data(), x.shape(), wt.shape(), stride, padding, oh, ow);
                Tensor::from_parts(x.shape(), data)
            });
            let gw = needs[1].then(|| {
                let data = grad_weight(g.data(), x.data(), x.shape(), wt.shape(), stride, padding, oh, ow);
                Tensor::from_parts(wt.shape(), data)
            });
            let gb = needs[2].then(|| {
                let mut data = vec![0.0f32; cout];
                for b in 0..n {
                    for co in 0..cout {
                        let plane = &g.data()[((b * cout + co) * oh * ow)..((b * cout + co + 1) * oh * ow)];
                        let mut acc = 0.0f32;
                        for v in plane {
                            acc += v;
                        }
                        data[co] += acc;
                    }
                }
                Tensor::from_parts(bias_shape, data)
            });
            Ok(vec![gi, gw, gb])
        }),
        "conv2d",
    )
}

#[allow(clippy::too_many_arguments)]
fn forward(
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    in_shape: [usize; 4],
    w_shape: [usize; 4],
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let [n, cin, h, w] = in_shape;
    let [cout, _, kh, kw] = w_shape;
    let mut out = vec![0.0f32; n * cout * oh * ow];
    // one (batch, out-channel) plane per task: disjoint writes
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, out_plane)| {
        let b = plane / cout;
        let co = plane % cout;
        out_plane.fill(bias[co]);
        for ci in 0..cin {
            let in_plane = &input[((b * cin + ci) * h * w)..((b * cin + ci + 1) * h * w)];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += wv * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn grad_input(
    gout: &[f32],
    weight: &[f32],
    in_shape: [usize; 4],
    w_shape: [usize; 4],
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let [n, cin, h, w] = in_shape;
    let [cout, _, kh, kw] = w_shape;
    let mut gin = vec![0.0f32; n * cin * h * w];
    gin.par_chunks_mut(h * w).enumerate().for_each(|(plane, gin_plane)| {
        let b = plane / cin;
        let ci = plane % cin;
        for co in 0..cout {
            let g_plane = &gout[((b * cout + co) * oh * ow)..((b * cout + co + 1) * oh * ow)];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        let gin_row = &mut gin_plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, gv) in g_row.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                gin_row[ix as usize] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

#[allow(clippy::too_many_arguments)]
fn grad_weight(
    gout: &[f32],
    input: &[f32],
    in_shape: [usize; 4],
    w_shape: [usize; 4],
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let [n, cin, h, w] = in_shape;
    let [cout, _, kh, kw] = w_shape;
    let mut gw = vec![0.0f32; cout * cin * kh * kw];
    gw.par_chunks_mut(cin * kh * kw).enumerate().for_each(|(co, gw_chunk)| {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0f32;
                    for b in 0..n {
                        let g_plane =
                            &gout[((b * cout + co) * oh * ow)..((b * cout + co + 1) * oh * ow)];
                        let in_plane =
                            &input[((b * cin + ci) * h * w)..((b * cin + ci + 1) * h * w)];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, gv) in g_row.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    acc += gv * in_row[ix as usize];
                                }
                            }
                        }
                    }
                    gw_chunk[(ci * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    gw
}
