//! Op semantics tests, including naive-reference oracles for the windowed
//! ops. The references here are deliberately independent nested-loop
//! implementations; the production path goes through im2col/GEMM.

use std::sync::Arc;

use super::autograd::backward;
use super::ops::*;
use super::Tensor;
use crate::rng::Rng;

// ---------------------------------------------------------------------------
// Naive references
// ---------------------------------------------------------------------------

pub(crate) fn conv2d_reference(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (o, kh, kw): (usize, usize, usize),
    b: Option<&[f64]>,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> (Vec<f64>, (usize, usize)) {
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for img in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((img * c + ic) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b[oc];
                    }
                    out[((img * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, (oh, ow))
}

/// Scatter-accumulate transposed convolution with crop, `w: [C,O,k,k]`.
pub(crate) fn deconv2d_reference(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (o, k): (usize, usize),
    stride: usize,
    crop: usize,
) -> Vec<f64> {
    let oh = h * stride;
    let ow = w * stride;
    let raw_h = (h - 1) * stride + k;
    let raw_w = (w - 1) * stride + k;
    let mut raw = vec![0.0; n * o * raw_h * raw_w];
    for img in 0..n {
        for ic in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = x[((img * c + ic) * h + iy) * w + ix];
                    for oc in 0..o {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = wt[((ic * o + oc) * k + ky) * k + kx];
                                let ry = iy * stride + ky;
                                let rx = ix * stride + kx;
                                raw[((img * o + oc) * raw_h + ry) * raw_w + rx] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; n * o * oh * ow];
    for img in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[((img * o + oc) * oh + oy) * ow + ox] =
                        raw[((img * o + oc) * raw_h + oy + crop) * raw_w + ox + crop];
                }
            }
        }
    }
    out
}

pub(crate) fn maxpool2d_reference(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
) -> (Vec<f64>, (usize, usize)) {
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let v = x[((img * c + ch) * h + oy * sh + ky) * w + ox * sw + kx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[((img * c + ch) * oh + oy) * ow + ox] = best;
                }
            }
        }
    }
    (out, (oh, ow))
}

fn spec_for(
    in_ch: usize,
    out_ch: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    has_bias: bool,
) -> ConvSpec {
    ConvSpec {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
        has_bias,
    }
}

// ---------------------------------------------------------------------------
// Spec examples
// ---------------------------------------------------------------------------

#[test]
fn conv_identity_kernel() {
    let x = Tensor::<f64>::from_f64_slice(
        &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        &[1, 1, 3, 3],
    )
    .unwrap();
    let w = Tensor::<f64>::from_f64_slice(&[1.0], &[1, 1, 1, 1]).unwrap();
    let y = conv2d(&x, &w, None, &spec_for(1, 1, (1, 1), (1, 1), (0, 0), false)).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_zero_kernel_zero_output() {
    let x = Tensor::<f64>::from_f64_slice(&[3.0; 18], &[1, 2, 3, 3]).unwrap();
    let w = Tensor::<f64>::zeros(&[2, 2, 2, 2]);
    let y = conv2d(&x, &w, None, &spec_for(2, 2, (2, 2), (1, 1), (0, 0), false)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_diagonal_kernel_derived() {
    // 2x2 kernel [[1,0],[0,1]] over 1..9 gives [[6,8],[12,14]].
    let x = Tensor::<f64>::from_f64_slice(
        &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        &[1, 1, 3, 3],
    )
    .unwrap();
    let w = Tensor::<f64>::from_f64_slice(&[1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]).unwrap();
    let y = conv2d(&x, &w, None, &spec_for(1, 1, (2, 2), (1, 1), (0, 0), false)).unwrap();
    assert_eq!(y.data(), &[6.0, 8.0, 12.0, 14.0]);
    let (reference, _) = conv2d_reference(
        &x.to_f64_vec(),
        (1, 1, 3, 3),
        &w.to_f64_vec(),
        (1, 2, 2),
        None,
        (1, 1),
        (0, 0),
    );
    assert_eq!(y.data(), reference.as_slice());
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
    let w = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
    assert!(conv2d(&x, &w, None, &spec_for(1, 1, (1, 1), (1, 1), (0, 0), false)).is_err());
    // non-positive output dims
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
    assert!(conv2d(&x, &w, None, &spec_for(1, 1, (3, 3), (1, 1), (0, 0), false)).is_err());
}

#[test]
fn batchnorm_constant_channel_is_zeroed() {
    let x = Tensor::<f64>::full(&[2, 2, 2, 2], 7.0);
    let gamma = Tensor::<f64>::full(&[2], 1.0);
    let beta = Tensor::<f64>::zeros(&[2]);
    let state = BnState::new(2);
    let y = batchnorm2d(&x, &gamma, &beta, &state, Mode::Train, 1e-5, 0.1).unwrap();
    assert!(y.data().iter().all(|&v| v.abs() <= 1e-3));
}

#[test]
fn batchnorm_beta_shifts_mean() {
    let mut rng = Rng::new(11);
    let x = Tensor::<f64>::from_f64_slice(
        &(0..16).map(|_| rng.uniform(-2.0, 2.0)).collect::<Vec<_>>(),
        &[2, 2, 2, 2],
    )
    .unwrap();
    let gamma = Tensor::<f64>::full(&[2], 1.0);
    let beta = Tensor::<f64>::full(&[2], 5.0);
    let state = BnState::new(2);
    let y = batchnorm2d(&x, &gamma, &beta, &state, Mode::Train, 1e-5, 0.1).unwrap();
    for ch in 0..2 {
        let mut sum = 0.0;
        for img in 0..2 {
            for i in 0..4 {
                sum += y.data()[(img * 2 + ch) * 4 + i];
            }
        }
        assert!((sum / 8.0 - 5.0).abs() < 1e-6);
    }
}

#[test]
fn batchnorm_two_values_normalize_to_unit() {
    let x = Tensor::<f64>::from_f64_slice(&[1.0, 3.0], &[2, 1, 1, 1]).unwrap();
    let gamma = Tensor::<f64>::full(&[1], 1.0);
    let beta = Tensor::<f64>::zeros(&[1]);
    let state = BnState::new(1);
    let y = batchnorm2d(&x, &gamma, &beta, &state, Mode::Train, 1e-12, 0.1).unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-5);
    assert!((y.data()[1] - 1.0).abs() < 1e-5);
}

#[test]
fn batchnorm_rejects_bad_eps() {
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let g = Tensor::<f64>::full(&[1], 1.0);
    let b = Tensor::<f64>::zeros(&[1]);
    let state = BnState::new(1);
    assert!(batchnorm2d(&x, &g, &b, &state, Mode::Train, 0.0, 0.1).is_err());
}

#[test]
fn relu_definition() {
    let x = Tensor::<f64>::from_f64_slice(&[-1.0, 0.0, 2.0], &[3]).unwrap();
    let y = relu(&x).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn maxpool_single_window() {
    let x = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
    let y = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
    assert_eq!(y.data(), &[4.0]);
}

#[test]
fn maxpool_4x4_derived() {
    let vals: Vec<f64> = (1..=16).map(|v| v as f64).collect();
    let x = Tensor::<f64>::from_f64_slice(&vals, &[1, 1, 4, 4]).unwrap();
    let y = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
    assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
    let (reference, _) = maxpool2d_reference(&vals, (1, 1, 4, 4), (2, 2), (2, 2));
    assert_eq!(y.data(), reference.as_slice());
}

#[test]
fn deconv_delta_response() {
    let x = Tensor::<f64>::from_f64_slice(&[3.0], &[1, 1, 1, 1]).unwrap();
    let w = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
    let y = deconv2d(&x, &w, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[3.0, 3.0, 3.0, 3.0]);
}

#[test]
fn deconv_identity_1x1() {
    let x = Tensor::<f64>::from_f64_slice(&[1.0, -2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
    let w = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
    let y = deconv2d(&x, &w, 1).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn deconv_2x2_block_upsample_derived() {
    let x = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
    let w = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
    let y = deconv2d(&x, &w, 2).unwrap();
    let expect = [
        1.0, 1.0, 2.0, 2.0, //
        1.0, 1.0, 2.0, 2.0, //
        3.0, 3.0, 4.0, 4.0, //
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(y.data(), &expect);
    let reference = deconv2d_reference(&x.to_f64_vec(), (1, 1, 2, 2), &[1.0; 4], (1, 2), 2, 0);
    assert_eq!(y.data(), reference.as_slice());
}

#[test]
fn deconv_rejects_unsupported_configs() {
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    // kernel < stride
    let w = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
    assert!(deconv2d(&x, &w, 2).is_err());
    // k == 2s with odd stride
    let w = Tensor::<f64>::zeros(&[1, 1, 6, 6]);
    assert!(deconv2d(&x, &w, 3).is_err());
}

#[test]
fn softmax_uniform_and_reference_values() {
    let x = Tensor::<f64>::zeros(&[3]);
    let y = softmax(&x, 0).unwrap();
    for &v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let x = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0], &[3]).unwrap();
    let y = softmax(&x, 0).unwrap();
    let expect = [0.09003, 0.24473, 0.66524];
    for (v, e) in y.data().iter().zip(&expect) {
        assert!((v - e).abs() < 1e-5);
    }
}

#[test]
fn sigmoid_at_zero() {
    let x = Tensor::<f64>::zeros(&[1]);
    assert_eq!(sigmoid(&x).unwrap().data(), &[0.5]);
}

#[test]
fn add_requires_exact_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[3, 2]);
    assert!(add(&a, &b).is_err());
}

#[test]
fn concat_channel_layout() {
    let a = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
    let b = Tensor::<f64>::full(&[1, 2, 2, 2], 2.0);
    let y = concat_channels(&a, &b).unwrap();
    assert_eq!(y.shape(), &[1, 3, 2, 2]);
    assert_eq!(&y.data()[0..4], &[1.0; 4]);
    assert_eq!(&y.data()[4..12], &[2.0; 8]);
}

#[test]
fn backward_sum_gives_ones_and_relu_subgradient() {
    let x = Tensor::<f64>::param(vec![-1.0, 2.0], &[2]).unwrap();
    let loss = sum_all(&relu(&x).unwrap()).unwrap();
    backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);

    let y = Tensor::<f64>::param(vec![0.3, -0.7, 1.1, 0.0], &[2, 2]).unwrap();
    let loss = sum_all(&y).unwrap();
    backward(&loss).unwrap();
    assert_eq!(y.grad().unwrap(), vec![1.0; 4]);
}

#[test]
fn backward_accumulates_across_calls() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
    let loss = sum_all(&x).unwrap();
    backward(&loss).unwrap();
    backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = relu(&x).unwrap();
    assert!(backward(&y).is_err());
}

#[test]
fn maxpool_tie_routes_to_first_in_row_major_order() {
    let x = Tensor::<f64>::param(vec![5.0, 5.0, 5.0, 5.0], &[1, 1, 2, 2]).unwrap();
    let loss = sum_all(&maxpool2d(&x, (2, 2), (2, 2)).unwrap()).unwrap();
    backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn nan_inputs_are_rejected_by_ops() {
    let x = Tensor::<f64>::from_f64_slice(&[1e308, 1e308], &[2]).unwrap();
    // exp overflows to +inf, which must surface as an error in debug builds.
    if cfg!(debug_assertions) {
        assert!(exp(&x).is_err());
    }
}

// ---------------------------------------------------------------------------
// Randomized oracle equivalence (module invariant)
// ---------------------------------------------------------------------------

#[test]
fn conv_deconv_maxpool_match_naive_references_on_random_shapes() {
    let mut rng = Rng::new(2024);
    for trial in 0..30 {
        let n = rng.uniform_usize(1, 3);
        let c = rng.uniform_usize(1, 5);
        let h = rng.uniform_usize(4, 12);
        let w = rng.uniform_usize(4, 12);
        let o = rng.uniform_usize(1, 5);
        let kh = rng.uniform_usize(1, 3.min(h));
        let kw = rng.uniform_usize(1, 3.min(w));
        let sh = rng.uniform_usize(1, 2);
        let sw = rng.uniform_usize(1, 2);
        let ph = rng.uniform_usize(0, kh - 1);
        let pw = rng.uniform_usize(0, kw - 1);

        let xv: Vec<f64> = (0..n * c * h * w).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let wv: Vec<f64> = (0..o * c * kh * kw).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let bv: Vec<f64> = (0..o).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let x = Tensor::<f64>::from_f64_slice(&xv, &[n, c, h, w]).unwrap();
        let wt = Tensor::<f64>::from_f64_slice(&wv, &[o, c, kh, kw]).unwrap();
        let b = Tensor::<f64>::from_f64_slice(&bv, &[o]).unwrap();
        let spec = spec_for(c, o, (kh, kw), (sh, sw), (ph, pw), true);
        let y = conv2d(&x, &wt, Some(&b), &spec).unwrap();
        let (reference, dims) =
            conv2d_reference(&xv, (n, c, h, w), &wv, (o, kh, kw), Some(&bv), (sh, sw), (ph, pw));
        assert_eq!(y.shape(), &[n, o, dims.0, dims.1]);
        for (a, r) in y.data().iter().zip(&reference) {
            assert!(
                (a - r).abs() / (r.abs() + 1e-12) < 1e-10,
                "conv trial {trial}: {a} vs {r}"
            );
        }

        // maxpool on the same input
        let (mk, ms) = ((kh.max(1), kw.max(1)), (sh, sw));
        if h >= mk.0 && w >= mk.1 {
            let y = maxpool2d(&x, mk, ms).unwrap();
            let (reference, _) = maxpool2d_reference(&xv, (n, c, h, w), mk, ms);
            assert_eq!(y.to_f64_vec(), reference);
        }

        // deconv: k = s and k = 2s configurations
        let s = rng.uniform_usize(1, 3);
        let configs: &[(usize, usize)] = if s % 2 == 0 {
            &[(s, 0), (2 * s, s / 2)]
        } else {
            &[(s, 0)]
        };
        for &(k, crop) in configs {
            let wv: Vec<f64> = (0..c * o * k * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let wt = Tensor::<f64>::from_f64_slice(&wv, &[c, o, k, k]).unwrap();
            let y = deconv2d(&x, &wt, s).unwrap();
            let reference = deconv2d_reference(&xv, (n, c, h, w), &wv, (o, k), s, crop);
            for (a, r) in y.data().iter().zip(&reference) {
                assert!(
                    (a - r).abs() / (r.abs() + 1e-12) < 1e-10,
                    "deconv trial {trial} k={k} s={s}"
                );
            }
        }
    }
}

#[test]
fn ops_are_deterministic_across_thread_pools() {
    // Same op, same inputs, different rayon pool sizes: bit-identical.
    let mut rng = Rng::new(7);
    let xv: Vec<f64> = (0..2 * 3 * 16 * 16).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let wv: Vec<f64> = (0..4 * 3 * 3 * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let spec = spec_for(3, 4, (3, 3), (1, 1), (1, 1), false);

    let run = |threads: usize| -> Vec<f64> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let x = Tensor::<f64>::from_f64_slice(&xv, &[2, 3, 16, 16]).unwrap();
            let w = Tensor::<f64>::from_f64_slice(&wv, &[4, 3, 3, 3]).unwrap();
            conv2d(&x, &w, None, &spec).unwrap().to_f64_vec()
        })
    };
    let single = run(1);
    let multi = run(4);
    assert_eq!(single, multi);
}

#[test]
fn det_sse_matches_hand_evaluated_formula() {
    // Single cell, single anchor, one responsible GT with hand-set raws.
    let raw_vals = [0.3f64, -0.2, 0.5, -0.4, 0.8, 0.6, -0.1, 0.2];
    let raw = Tensor::<f64>::from_f64_slice(&raw_vals, &[1, 8, 1, 1]).unwrap();
    let assign = Arc::new(DetAssignment {
        batch: 1,
        anchors: 1,
        classes: 3,
        grid_h: 1,
        grid_w: 1,
        responsible: vec![true],
        tx: vec![0.6],
        ty: vec![0.4],
        tw: vec![0.1],
        th: vec![-0.2],
        class_idx: vec![2],
        collisions: 0,
    });
    let loss = det_sse(&raw, &assign, 5.0, 0.5).unwrap().item();

    let sg = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (sx, sy) = (sg(0.3), sg(-0.2));
    let coord = 5.0
        * ((sx - 0.6).powi(2) + (sy - 0.4).powi(2) + (0.5f64 - 0.1).powi(2) + (-0.4f64 + 0.2).powi(2));
    let obj = (sg(0.8) - 1.0).powi(2);
    let m = [0.6f64, -0.1, 0.2];
    let mx = m.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = m.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let cls = (p[0]).powi(2) + (p[1]).powi(2) + (p[2] - 1.0).powi(2);
    let expect = coord + obj + cls;
    assert!((loss - expect).abs() < 1e-10, "{loss} vs {expect}");
}

#[test]
fn det_sse_perfect_negative_is_zero() {
    let raw = Tensor::<f64>::full(&[1, 8, 2, 2], 0.0);
    let raw = add(&raw, &Tensor::<f64>::full(&[1, 8, 2, 2], -40.0)).unwrap();
    let assign = Arc::new(DetAssignment {
        batch: 1,
        anchors: 1,
        classes: 3,
        grid_h: 2,
        grid_w: 2,
        responsible: vec![false; 4],
        tx: vec![0.0; 4],
        ty: vec![0.0; 4],
        tw: vec![0.0; 4],
        th: vec![0.0; 4],
        class_idx: vec![0; 4],
        collisions: 0,
    });
    let loss = det_sse(&raw, &assign, 5.0, 0.5).unwrap().item();
    assert!(loss < 1e-6, "{loss}");
}

#[test]
fn seg_cross_entropy_examples() {
    // Uniform logits, C=3 -> ln 3.
    let logits = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
    let labels = vec![0u8, 1, 2, 0];
    let loss = seg_cross_entropy(&logits, &labels, None).unwrap().item();
    assert!((loss - 3.0f64.ln()).abs() < 1e-9);

    // Confident correct prediction -> ~0.
    let mut vals = vec![0.0; 3 * 4];
    for p in 0..4 {
        vals[labels[p] as usize * 4 + p] = 1000.0;
    }
    let logits = Tensor::<f64>::from_f64_slice(&vals, &[1, 3, 2, 2]).unwrap();
    let loss = seg_cross_entropy(&logits, &labels, None).unwrap().item();
    assert!(loss < 1e-6);

    // Single pixel, logits [1,2,3], label 2 -> ln(1 + e^-1 + e^-2).
    let logits = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0], &[1, 3, 1, 1]).unwrap();
    let loss = seg_cross_entropy(&logits, &[2], None).unwrap().item();
    let expect = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
    assert!((loss - expect).abs() < 1e-12);
    assert!((expect - 0.40761).abs() < 1e-5);
}

#[test]
fn seg_cross_entropy_all_ignored_is_an_error() {
    let logits = Tensor::<f64>::zeros(&[1, 3, 1, 2]);
    assert!(seg_cross_entropy(&logits, &[255, 255], None).is_err());
}

#[test]
fn seg_cross_entropy_masked_pixels_have_zero_gradient() {
    let logits = Tensor::<f64>::param(vec![0.5, -0.2, 0.8, 0.1, 0.3, -0.4], &[1, 3, 1, 2]).unwrap();
    let mask = vec![true, false];
    let loss = seg_cross_entropy(&logits, &[1, 0], Some(&mask)).unwrap();
    backward(&loss).unwrap();
    let g = logits.grad().unwrap();
    for ch in 0..3 {
        assert_eq!(g[ch * 2 + 1], 0.0, "masked pixel leaked gradient");
        assert!(g[ch * 2] != 0.0);
    }
}

#[test]
fn seg_cross_entropy_invariant_to_constant_logit_shift() {
    let mut rng = Rng::new(4);
    let vals: Vec<f64> = (0..3 * 6).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let shifted: Vec<f64> = vals.iter().map(|v| v + 13.5).collect();
    let labels = vec![0u8, 1, 2, 1, 0, 2];
    let a = seg_cross_entropy(
        &Tensor::<f64>::from_f64_slice(&vals, &[1, 3, 2, 3]).unwrap(),
        &labels,
        None,
    )
    .unwrap()
    .item();
    let b = seg_cross_entropy(
        &Tensor::<f64>::from_f64_slice(&shifted, &[1, 3, 2, 3]).unwrap(),
        &labels,
        None,
    )
    .unwrap()
    .item();
    assert!((a - b).abs() < 1e-9);
}
