//! Gradient checks against central finite differences.
//!
//! The oracle is a separate f64 re-implementation of every op's forward math
//! (naive scalar loops, no shared code with the crate). Finite differences
//! run at 64-bit precision with ε = 1e-4; analytic f32 gradients must match
//! within a relative error of 1e-3. Coordinates where two step sizes
//! disagree (a kink of relu/|·|/clamp) are skipped, and each case must keep
//! most of its coordinates.

use plq_tensor::{
    add, batch_slice, conv2d, div_scalar, l1_diff, l2_diff, l2_norm, mean, pixel_shuffle, relu,
    scalar_mul, std_dev, GradTape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// f64 reference implementations, independent of the crate internals.
mod reference {
    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    pub fn scalar_mul(x: &[f64], s: f64) -> Vec<f64> {
        x.iter().map(|v| v * s).collect()
    }

    pub fn mean(x: &[f64]) -> f64 {
        x.iter().sum::<f64>() / x.len() as f64
    }

    pub fn std_dev(x: &[f64]) -> f64 {
        let mu = mean(x);
        (x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64).sqrt()
    }

    pub fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    pub fn l2_norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    /// Naive 7-loop cross-correlation.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        input: &[f64],
        weight: &[f64],
        bias: &[f64],
        in_shape: [usize; 4],
        w_shape: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let [n, cin, h, w] = in_shape;
        let [cout, _, kh, kw] = w_shape;
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let iv = input
                                            [((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                        let wv = weight[((co * cin + ci) * kh + ky) * kw + kx];
                                        acc += iv * wv;
                                    }
                                }
                            }
                        }
                        out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn pixel_shuffle(x: &[f64], shape: [usize; 4], r: usize) -> Vec<f64> {
        let [n, cin, h, w] = shape;
        let c_out = cin / (r * r);
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for c in 0..c_out {
                for i in 0..r {
                    for j in 0..r {
                        for y in 0..h {
                            for xx in 0..w {
                                let src = ((b * cin + c * r * r + i * r + j) * h + y) * w + xx;
                                let dst = ((b * c_out + c) * (h * r) + y * r + i) * (w * r)
                                    + xx * r
                                    + j;
                                out[dst] = x[src];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

struct CaseResult {
    checked: usize,
    skipped: usize,
    max_rel: f64,
}

/// Runs one gradient check: `tape_loss` builds the f32 graph from watched
/// copies of `inputs`; `ref_loss` evaluates the same scalar in f64.
fn gradcheck(
    inputs: &[([usize; 4], Vec<f32>)],
    tape_loss: &dyn Fn(&[Tensor]) -> Tensor,
    ref_loss: &dyn Fn(&[Vec<f64>]) -> f64,
) -> CaseResult {
    let tape = GradTape::new();
    let watched: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| tape.watch(&Tensor::new(*shape, data.clone()).unwrap()))
        .collect();
    let loss = tape_loss(&watched);
    let grads = tape.backward(&loss).unwrap();

    let f64_inputs: Vec<Vec<f64>> =
        inputs.iter().map(|(_, d)| d.iter().map(|&v| v as f64).collect()).collect();

    let mut result = CaseResult { checked: 0, skipped: 0, max_rel: 0.0 };
    for (which, t) in watched.iter().enumerate() {
        let analytic = grads.get(t).expect("watched tensor must have a gradient");
        for idx in 0..t.numel() {
            let n1 = central(ref_loss, &f64_inputs, which, idx, 1e-4);
            let n2 = central(ref_loss, &f64_inputs, which, idx, 5e-5);
            if (n1 - n2).abs() > 1e-4 * n1.abs().max(n2.abs()).max(1.0) {
                result.skipped += 1; // kink: one-sided derivative mismatch
                continue;
            }
            let a = analytic.data()[idx] as f64;
            let err = (a - n1).abs();
            let rel = err / a.abs().max(n1.abs()).max(1e-30);
            if err > 1e-6 {
                result.max_rel = result.max_rel.max(rel);
            }
            result.checked += 1;
        }
    }
    result
}

fn central(
    f: &dyn Fn(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    which: usize,
    idx: usize,
    eps: f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    let mut minus = inputs.to_vec();
    plus[which][idx] += eps;
    minus[which][idx] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

fn rand_data(rng: &mut ChaCha8Rng, n: usize, margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let mut v: f32 = rng.gen_range(-2.0..2.0);
            if v.abs() < margin {
                v = margin.copysign(if v == 0.0 { 1.0 } else { v });
            }
            v
        })
        .collect()
}

#[test]
fn gradcheck_all_ops_against_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut total_cases = 0usize;
    let mut total_checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut run = |r: CaseResult| {
        total_cases += 1;
        total_checked += r.checked;
        assert!(r.checked > r.skipped, "too many kink skips: {} vs {}", r.skipped, r.checked);
        max_rel = max_rel.max(r.max_rel);
    };

    for _ in 0..25 {
        let shape = [1, 2, 2, 4];
        let n = 16;

        // relu (inputs kept away from the kink at 0)
        let x = rand_data(&mut rng, n, 0.05);
        run(gradcheck(
            &[(shape, x)],
            &|t| mean(&relu(&t[0]).unwrap()).unwrap(),
            &|d| reference::mean(&reference::relu(&d[0])),
        ));

        // add
        let (a, b) = (rand_data(&mut rng, n, 0.0), rand_data(&mut rng, n, 0.0));
        run(gradcheck(
            &[(shape, a), (shape, b)],
            &|t| mean(&add(&t[0], &t[1]).unwrap()).unwrap(),
            &|d| reference::mean(&reference::add(&d[0], &d[1])),
        ));

        // scalar_mul
        let s: f32 = rng.gen_range(-2.0..2.0);
        let x = rand_data(&mut rng, n, 0.0);
        run(gradcheck(
            &[(shape, x)],
            &|t| mean(&scalar_mul(&t[0], s).unwrap()).unwrap(),
            &|d| reference::mean(&reference::scalar_mul(&d[0], s as f64)),
        ));

        // div_scalar (gradient flows into numerator and denominator)
        let x = rand_data(&mut rng, n, 0.0);
        let denom = if rng.gen_bool(0.5) { rng.gen_range(0.5..2.0) } else { rng.gen_range(-2.0..-0.5f32) };
        run(gradcheck(
            &[(shape, x), ([1, 1, 1, 1], vec![denom])],
            &|t| mean(&div_scalar(&t[0], &t[1]).unwrap()).unwrap(),
            &|d| reference::mean(&reference::scalar_mul(&d[0], 1.0 / d[1][0])),
        ));

        // batch_slice
        let x = rand_data(&mut rng, 24, 0.0);
        let idx = rng.gen_range(0..2usize);
        run(gradcheck(
            &[([2, 3, 2, 2], x)],
            &|t| mean(&batch_slice(&t[0], idx).unwrap()).unwrap(),
            &|d| reference::mean(&d[0][idx * 12..(idx + 1) * 12]),
        ));

        // pixel_shuffle followed by l1 against a fixed pattern, so the
        // gradient routed back through the scatter is non-uniform
        let x = rand_data(&mut rng, 32, 0.0);
        let pattern: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let p64: Vec<f64> = pattern.iter().map(|&v| v as f64).collect();
        let pattern_t = Tensor::new([1, 2, 4, 4], pattern).unwrap();
        run(gradcheck(
            &[([1, 8, 2, 2], x)],
            &|t| l1_diff(&pixel_shuffle(&t[0], 2).unwrap(), &pattern_t).unwrap(),
            &|d| reference::l1_diff(&reference::pixel_shuffle(&d[0], [1, 8, 2, 2], 2), &p64),
        ));

        // reductions
        let x = rand_data(&mut rng, n, 0.0);
        run(gradcheck(
            &[(shape, x)],
            &|t| std_dev(&t[0]).unwrap(),
            &|d| reference::std_dev(&d[0]),
        ));
        let (a, b) = (rand_data(&mut rng, n, 0.0), rand_data(&mut rng, n, 0.0));
        run(gradcheck(
            &[(shape, a.clone()), (shape, b.clone())],
            &|t| l1_diff(&t[0], &t[1]).unwrap(),
            &|d| reference::l1_diff(&d[0], &d[1]),
        ));
        run(gradcheck(
            &[(shape, a.clone())],
            &|t| l2_norm(&t[0]).unwrap(),
            &|d| reference::l2_norm(&d[0]),
        ));
        run(gradcheck(
            &[(shape, a), (shape, b)],
            &|t| l2_diff(&t[0], &t[1]).unwrap(),
            &|d| reference::l2_diff(&d[0], &d[1]),
        ));

        // conv2d: gradients for input, weight, and bias
        let in_shape = [1, 2, 4, 4];
        let w_shape = [2, 2, 3, 3];
        let x = rand_data(&mut rng, 32, 0.0);
        let w = rand_data(&mut rng, 36, 0.0);
        let bias = rand_data(&mut rng, 2, 0.0);
        run(gradcheck(
            &[(in_shape, x), (w_shape, w), ([1, 2, 1, 1], bias)],
            &|t| mean(&conv2d(&t[0], &t[1], &t[2], 1, 1).unwrap()).unwrap(),
            &|d| {
                reference::mean(&reference::conv2d(&d[0], &d[1], &d[2], in_shape, w_shape, 1, 1))
            },
        ));
    }

    assert!(total_cases >= 200, "ran only {total_cases} gradcheck cases");
    assert!(
        max_rel < 1e-3,
        "max relative gradient error {max_rel:.3e} over {total_checked} coordinates"
    );
}

#[test]
fn gradcheck_composed_graph() {
    // conv → relu → conv → residual add → l1 against a fixed target
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    for _ in 0..10 {
        let in_shape = [1, 2, 4, 4];
        let w_shape = [2, 2, 3, 3];
        let x = rand_data(&mut rng, 32, 0.0);
        let w1 = rand_data(&mut rng, 36, 0.0);
        let w2 = rand_data(&mut rng, 36, 0.0);
        let b = rand_data(&mut rng, 2, 0.0);
        let target: Vec<f32> = rand_data(&mut rng, 32, 0.0);
        let t64: Vec<f64> = target.iter().map(|&v| v as f64).collect();
        let tgt = Tensor::new(in_shape, target).unwrap();

        let r = gradcheck(
            &[(in_shape, x), (w_shape, w1), (w_shape, w2), ([1, 2, 1, 1], b)],
            &|t| {
                let h1 = relu(&conv2d(&t[0], &t[1], &t[3], 1, 1).unwrap()).unwrap();
                let h2 = conv2d(&h1, &t[2], &t[3], 1, 1).unwrap();
                let out = add(&scalar_mul(&h2, 0.5).unwrap(), &t[0]).unwrap();
                l1_diff(&out, &tgt).unwrap()
            },
            &|d| {
                let h1 = reference::relu(&reference::conv2d(
                    &d[0], &d[1], &d[3], in_shape, w_shape, 1, 1,
                ));
                let h2 = reference::conv2d(&h1, &d[2], &d[3], in_shape, w_shape, 1, 1);
                let out: Vec<f64> =
                    h2.iter().zip(&d[0]).map(|(a, b)| 0.5 * a + b).collect();
                reference::l1_diff(&out, &t64)
            },
        );
        assert!(r.checked > 2 * r.skipped, "composed case too kinky: {}/{}", r.skipped, r.checked);
        assert!(r.max_rel < 1e-3, "composed graph max rel err {:.3e}", r.max_rel);
    }
}

#[test]
fn conv2d_matches_naive_reference_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let n = rng.gen_range(1..3usize);
        let cin = rng.gen_range(1..4usize);
        let cout = rng.gen_range(1..4usize);
        let k = *[1usize, 3].get(rng.gen_range(0..2usize)).unwrap();
        let h = rng.gen_range(k..k + 5);
        let w = rng.gen_range(k..k + 5);
        let stride = rng.gen_range(1..3usize);
        let padding = rng.gen_range(0..2usize);
        if h + 2 * padding < k || w + 2 * padding < k {
            continue;
        }
        let in_shape = [n, cin, h, w];
        let w_shape = [cout, cin, k, k];
        let x = rand_data(&mut rng, n * cin * h * w, 0.0);
        let wt = rand_data(&mut rng, cout * cin * k * k, 0.0);
        let b = rand_data(&mut rng, cout, 0.0);

        let y = conv2d(
            &Tensor::new(in_shape, x.clone()).unwrap(),
            &Tensor::new(w_shape, wt.clone()).unwrap(),
            &Tensor::new([1, cout, 1, 1], b.clone()).unwrap(),
            stride,
            padding,
        )
        .unwrap();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let w64: Vec<f64> = wt.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let want = reference::conv2d(&x64, &w64, &b64, in_shape, w_shape, stride, padding);
        assert_eq!(y.numel(), want.len());
        for (got, want) in y.data().iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-5, "conv2d deviates from reference");
        }
    }
}

#[test]
fn pixel_shuffle_inverse_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let r = rng.gen_range(1..4usize);
        let c = rng.gen_range(1..3usize) * r * r;
        let shape = [rng.gen_range(1..3usize), c, rng.gen_range(1..4usize), rng.gen_range(1..4usize)];
        let data = rand_data(&mut rng, shape.iter().product(), 0.0);
        let x = Tensor::new(shape, data.clone()).unwrap();
        let y = pixel_shuffle(&x, r).unwrap();

        // scalar reference inverse of the channel-to-space formula
        let [n, cin, h, w] = shape;
        let c_out = cin / (r * r);
        let mut back = vec![0.0f32; x.numel()];
        for b in 0..n {
            for co in 0..c_out {
                for i in 0..r {
                    for j in 0..r {
                        for yy in 0..h {
                            for xx in 0..w {
                                let src = ((b * c_out + co) * (h * r) + yy * r + i) * (w * r)
                                    + xx * r
                                    + j;
                                let dst = ((b * cin + co * r * r + i * r + j) * h + yy) * w + xx;
                                back[dst] = y.data()[src];
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(back, data);
    }
}

#[test]
fn ops_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Tensor::new([2, 3, 8, 8], rand_data(&mut rng, 384, 0.0)).unwrap();
    let w = Tensor::new([4, 3, 3, 3], rand_data(&mut rng, 108, 0.0)).unwrap();
    let b = Tensor::new([1, 4, 1, 1], rand_data(&mut rng, 4, 0.0)).unwrap();
    let y1 = conv2d(&x, &w, &b, 1, 1).unwrap();
    let y2 = conv2d(&x, &w, &b, 1, 1).unwrap();
    assert!(y1.bitwise_eq(&y2));
    let m1 = std_dev(&y1).unwrap();
    let m2 = std_dev(&y2).unwrap();
    assert_eq!(m1.scalar_value().unwrap().to_bits(), m2.scalar_value().unwrap().to_bits());
}

#[test]
fn non_finite_results_are_rejected() {
    let x = Tensor::new([1, 1, 1, 2], vec![1.0e38, 1.0e38]).unwrap();
    let err = scalar_mul(&x, 10.0).unwrap_err();
    assert!(matches!(err, plq_tensor::TensorError::NonFinite { .. }));
}
