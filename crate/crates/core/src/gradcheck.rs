//! Central finite-difference validation of the analytic gradients.
//!
//! Every differentiable op is exercised through a tiny f64 graph; the
//! backward result is compared against central differences of the scalar
//! loss. Comparison is at the gradient-vector level:
//! `||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)`,
//! which keeps the check honest for elements whose true gradient is zero.

use std::sync::Arc;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::autograd::backward;
use crate::tensor::ops::{self, BnState, ConvSpec, DetAssignment, Mode};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub rel_err: f64,
    pub passed: bool,
}

/// Checks `f`'s analytic gradients w.r.t. each entry of `inputs` against
/// central finite differences with step `h`. Returns the worst relative
/// error across inputs.
pub fn check_gradients<F>(f: F, inputs: &[Vec<f64>], shapes: &[Vec<usize>], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let make = |values: &[Vec<f64>]| -> Result<Vec<Tensor<f64>>> {
        values
            .iter()
            .zip(shapes)
            .map(|(v, s)| Tensor::param(v.clone(), s))
            .collect()
    };

    let params = make(inputs)?;
    let loss = f(&params)?;
    backward(&loss)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = param
            .grad()
            .unwrap_or_else(|| vec![0.0; param.numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for ei in 0..numeric.len() {
            let orig = work[pi][ei];
            work[pi][ei] = orig + h;
            let up = f(&make(&work)?)?.item();
            work[pi][ei] = orig - h;
            let down = f(&make(&work)?)?.item();
            work[pi][ei] = orig;
            numeric[ei] = (up - down) / (2.0 * h);
        }
        let norm_a = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_n = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let denom = norm_a.max(norm_n);
        let rel = if denom < 1e-10 { 0.0 } else { diff / denom };
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn rand_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

/// Finite-difference suite covering every differentiable op, one entry per
/// op, for a given seed.
pub fn op_suite(seed: u64) -> Vec<(String, Result<f64>)> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<f64>| out.push((name.to_string(), r));

    let spec = ConvSpec {
        in_ch: 2,
        out_ch: 3,
        kernel: (3, 3),
        stride: (2, 2),
        padding: (1, 1),
        has_bias: true,
    };
    let mut rng = Rng::keyed(seed, 1);
    let x = rand_vec(&mut rng, 2 * 2 * 5 * 6, -1.0, 1.0);
    let w = rand_vec(&mut rng, 3 * 2 * 3 * 3, -0.8, 0.8);
    let b = rand_vec(&mut rng, 3, -0.5, 0.5);
    push(
        "conv2d",
        check_gradients(
            |t| ops::sum_all(&ops::conv2d(&t[0], &t[1], Some(&t[2]), &spec)?),
            &[x, w, b],
            &[vec![2, 2, 5, 6], vec![3, 2, 3, 3], vec![3]],
            DEFAULT_STEP,
        ),
    );

    let mut rng = Rng::keyed(seed, 2);
    let x = rand_vec(&mut rng, 1 * 2 * 3 * 4, -1.0, 1.0);
    let w = rand_vec(&mut rng, 2 * 3 * 2 * 2, -0.8, 0.8);
    push(
        "deconv2d_k2s2",
        check_gradients(
            |t| ops::sum_all(&ops::relu(&ops::deconv2d(&t[0], &t[1], 2)?)?),
            &[x, w],
            &[vec![1, 2, 3, 4], vec![2, 3, 2, 2]],
            DEFAULT_STEP,
        ),
    );

    let mut rng = Rng::keyed(seed, 3);
    let x = rand_vec(&mut rng, 1 * 2 * 2 * 3, -1.0, 1.0);
    let w = rand_vec(&mut rng, 2 * 1 * 4 * 4, -0.8, 0.8);
    push(
        "deconv2d_k4s2_crop",
        check_gradients(
            |t| ops::sum_all(&ops::deconv2d(&t[0], &t[1], 2)?),
            &[x, w],
            &[vec![1, 2, 2, 3], vec![2, 1, 4, 4]],
            DEFAULT_STEP,
        ),
    );

    for (name, train) in [("batchnorm2d_train", true), ("batchnorm2d_eval", false)] {
        let mut rng = Rng::keyed(seed, 4);
        let x = rand_vec(&mut rng, 2 * 3 * 2 * 2, -1.0, 1.0);
        let gamma = rand_vec(&mut rng, 3, 0.5, 1.5);
        let beta = rand_vec(&mut rng, 3, -0.5, 0.5);
        let rm = rand_vec(&mut rng, 3, -0.2, 0.2);
        let rv = rand_vec(&mut rng, 3, 0.5, 1.5);
        push(
            name,
            check_gradients(
                move |t| {
                    let state = BnState::from_vecs(rm.clone(), rv.clone())?;
                    let mode = if train { Mode::Train } else { Mode::Eval };
                    let y = ops::batchnorm2d(&t[0], &t[1], &t[2], &state, mode, 1e-5, 0.1)?;
                    ops::sum_all(&ops::relu(&y)?)
                },
                &[x, gamma, beta],
                &[vec![2, 3, 2, 2], vec![3], vec![3]],
                DEFAULT_STEP,
            ),
        );
    }

    let mut rng = Rng::keyed(seed, 5);
    let x = rand_vec(&mut rng, 1 * 1 * 4 * 4, -1.0, 1.0);
    push(
        "maxpool2d",
        check_gradients(
            |t| ops::sum_all(&ops::maxpool2d(&t[0], (2, 2), (2, 2))?),
            &[x],
            &[vec![1, 1, 4, 4]],
            DEFAULT_STEP,
        ),
    );

    let mut rng = Rng::keyed(seed, 6);
    let a = rand_vec(&mut rng, 12, -1.0, 1.0);
    let b = rand_vec(&mut rng, 12, -1.0, 1.0);
    // A fixed readout conv decorrelates the softmax lanes; a plain sum of a
    // softmax has near-zero gradient by construction.
    let readout = Tensor::<f64>::from_f64_slice(&rand_vec(&mut rng, 6, -1.0, 1.0), &[1, 6, 1, 1])
        .expect("readout weights");
    let readout_spec = ConvSpec {
        in_ch: 6,
        out_ch: 1,
        kernel: (1, 1),
        stride: (1, 1),
        padding: (0, 0),
        has_bias: false,
    };
    push(
        "add_softmax_sigmoid_exp",
        check_gradients(
            move |t| {
                let s = ops::add(&t[0], &t[1])?;
                let sm = ops::softmax(&s, 1)?;
                let sg = ops::sigmoid(&sm)?;
                let e = ops::exp(&ops::scale(&sg, 0.5)?)?;
                ops::sum_all(&ops::conv2d(&e, &readout, None, &readout_spec)?)
            },
            &[a, b],
            &[vec![2, 6, 1, 1], vec![2, 6, 1, 1]],
            DEFAULT_STEP,
        ),
    );

    let mut rng = Rng::keyed(seed, 7);
    let a = rand_vec(&mut rng, 2 * 2 * 2 * 2, -1.0, 1.0);
    let b = rand_vec(&mut rng, 2 * 3 * 2 * 2, -1.0, 1.0);
    push(
        "concat_channels",
        check_gradients(
            |t| {
                let c = ops::concat_channels(&t[0], &t[1])?;
                ops::sum_all(&ops::relu(&c)?)
            },
            &[a, b],
            &[vec![2, 2, 2, 2], vec![2, 3, 2, 2]],
            DEFAULT_STEP,
        ),
    );

    let mut rng = Rng::keyed(seed, 8);
    let logits = rand_vec(&mut rng, 2 * 3 * 2 * 2, -1.5, 1.5);
    let labels: Vec<u8> = (0..8).map(|_| (rng.next_u64() % 4) as u8).collect();
    let labels: Vec<u8> = labels.iter().map(|&l| if l == 3 { 255 } else { l }).collect();
    push(
        "seg_cross_entropy",
        check_gradients(
            move |t| ops::seg_cross_entropy(&t[0], &labels, None),
            &[logits],
            &[vec![2, 3, 2, 2]],
            DEFAULT_STEP,
        ),
    );

    let mut rng = Rng::keyed(seed, 9);
    let assign = random_assignment(&mut rng, 2, 2, 3, 2, 2);
    let raw = rand_vec(&mut rng, 2 * 2 * (5 + 3) * 2 * 2, -1.0, 1.0);
    push(
        "det_sse",
        check_gradients(
            move |t| ops::det_sse(&t[0], &assign, 5.0, 0.5),
            &[raw],
            &[vec![2, 16, 2, 2]],
            DEFAULT_STEP,
        ),
    );

    out
}

/// Random responsibility pattern for the detection-loss gradient check.
pub fn random_assignment(
    rng: &mut Rng,
    batch: usize,
    anchors: usize,
    classes: usize,
    grid_h: usize,
    grid_w: usize,
) -> Arc<DetAssignment> {
    let cells = batch * anchors * grid_h * grid_w;
    let mut responsible = vec![false; cells];
    let mut tx = vec![0.0; cells];
    let mut ty = vec![0.0; cells];
    let mut tw = vec![0.0; cells];
    let mut th = vec![0.0; cells];
    let mut class_idx = vec![0u32; cells];
    for i in 0..cells {
        if rng.next_f64() < 0.3 {
            responsible[i] = true;
            tx[i] = rng.uniform(0.05, 0.95);
            ty[i] = rng.uniform(0.05, 0.95);
            tw[i] = rng.uniform(-0.8, 0.8);
            th[i] = rng.uniform(-0.8, 0.8);
            class_idx[i] = (rng.next_u64() % classes as u64) as u32;
        }
    }
    Arc::new(DetAssignment {
        batch,
        anchors,
        classes,
        grid_h,
        grid_w,
        responsible,
        tx,
        ty,
        tw,
        th,
        class_idx,
        collisions: 0,
    })
}

/// Finite-difference check of a complete multi-task micro network: a
/// shared conv/bn/relu/maxpool trunk feeding a deconv+cross-entropy
/// segmentation branch and a conv+SSE detection branch, combined as
/// `w_seg * L_seg + w_det * L_det`. Checks every trainable tensor and
/// returns (worst rel err, parameter count).
pub fn mtl_micro_net_check(seed: u64, w_seg: f64, w_det: f64) -> Result<(f64, usize)> {
    let mut rng = Rng::keyed(seed, 0x317C);
    let (h, w) = (8usize, 8usize);
    let trunk_ch = 4usize;
    let seg_classes = 3usize;
    let det_classes = 2usize;
    let anchors = 1usize;

    // input image (fixed, not a parameter)
    let image = Tensor::<f64>::from_f64_slice(
        &rand_vec(&mut rng, 2 * 3 * h * w, 0.0, 1.0),
        &[2, 3, h, w],
    )?;
    let labels: Vec<u8> = (0..2 * h * w)
        .map(|_| (rng.next_u64() % seg_classes as u64) as u8)
        .collect();
    let assign = random_assignment(&mut rng, 2, anchors, det_classes, h / 4, w / 4);

    // parameter pack: trunk conv, bn affine, seg score conv + deconv,
    // det 3x3 conv + 1x1 head
    let shapes: Vec<Vec<usize>> = vec![
        vec![trunk_ch, 3, 3, 3],                       // trunk conv
        vec![trunk_ch],                                // bn gamma
        vec![trunk_ch],                                // bn beta
        vec![seg_classes, trunk_ch, 1, 1],             // seg score
        vec![seg_classes],                             // seg score bias
        vec![seg_classes, seg_classes, 4, 4],          // seg deconv x4... (k=4, s=2 twice)
        vec![trunk_ch, trunk_ch, 3, 3],                // det conv
        vec![anchors * (5 + det_classes), trunk_ch, 1, 1], // det head
        vec![anchors * (5 + det_classes)],             // det head bias
    ];
    let mut inputs = Vec::new();
    for s in &shapes {
        let n: usize = s.iter().product();
        inputs.push(rand_vec(&mut rng, n, -0.5, 0.5));
    }
    let param_count: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();

    let trunk_spec = ConvSpec {
        in_ch: 3,
        out_ch: trunk_ch,
        kernel: (3, 3),
        stride: (1, 1),
        padding: (1, 1),
        has_bias: false,
    };
    let score_spec = ConvSpec {
        in_ch: trunk_ch,
        out_ch: seg_classes,
        kernel: (1, 1),
        stride: (1, 1),
        padding: (0, 0),
        has_bias: true,
    };
    let det_conv_spec = ConvSpec {
        in_ch: trunk_ch,
        out_ch: trunk_ch,
        kernel: (3, 3),
        stride: (1, 1),
        padding: (1, 1),
        has_bias: false,
    };
    let det_head_spec = ConvSpec {
        in_ch: trunk_ch,
        out_ch: anchors * (5 + det_classes),
        kernel: (1, 1),
        stride: (1, 1),
        padding: (0, 0),
        has_bias: true,
    };

    let labels_c = labels.clone();
    let image_c = image.clone();
    let assign_c = Arc::clone(&assign);
    let err = check_gradients(
        move |t| {
            // shared trunk at stride 4
            let c1 = ops::conv2d(&image_c, &t[0], None, &trunk_spec)?;
            let state = BnState::new(trunk_ch);
            let bn = ops::batchnorm2d(&c1, &t[1], &t[2], &state, Mode::Train, 1e-5, 0.1)?;
            let act = ops::relu(&bn)?;
            let shared = ops::maxpool2d(&act, (4, 4), (4, 4))?;

            // segmentation branch back to input resolution (x2 deconv twice)
            let score = ops::conv2d(&shared, &t[3], Some(&t[4]), &score_spec)?;
            let up1 = ops::deconv2d(&score, &t[5], 2)?;
            let up2 = ops::deconv2d(&up1, &t[5], 2)?;
            let l_seg = ops::seg_cross_entropy(&up2, &labels_c, None)?;

            // detection branch on the shared features
            let dconv = ops::relu(&ops::conv2d(&shared, &t[6], None, &det_conv_spec)?)?;
            let raw = ops::conv2d(&dconv, &t[7], Some(&t[8]), &det_head_spec)?;
            let l_det = ops::det_sse(&raw, &assign_c, 5.0, 0.5)?;

            ops::add(&ops::scale(&l_seg, w_seg)?, &ops::scale(&l_det, w_det)?)
        },
        &inputs,
        &shapes,
        DEFAULT_STEP,
    )?;
    Ok((err, param_count))
}

/// Runs the op suite for `seeds` and reports each check.
pub fn run_op_suite(seeds: &[u64], tolerance: f64) -> Vec<CheckOutcome> {
    let mut results = Vec::new();
    for &seed in seeds {
        for (name, res) in op_suite(seed) {
            let (rel_err, passed) = match res {
                Ok(err) => (err, err < tolerance),
                Err(_) => (f64::INFINITY, false),
            };
            results.push(CheckOutcome {
                name: format!("{name}[seed={seed}]"),
                rel_err,
                passed,
            });
        }
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_gradients_match_finite_differences_over_20_seeds() {
        let seeds: Vec<u64> = (0..20).collect();
        for outcome in run_op_suite(&seeds, DEFAULT_TOLERANCE) {
            assert!(
                outcome.passed,
                "{} rel_err={}",
                outcome.name, outcome.rel_err
            );
        }
    }

    #[test]
    fn backward_linearity_of_weighted_sums() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g), within 1e-10 (f64).
        let mut rng = Rng::new(99);
        let data = rand_vec(&mut rng, 8, -1.0, 1.0);
        let grad_of = |wf: f64, wg: f64| -> Vec<f64> {
            let x = Tensor::<f64>::param(data.clone(), &[2, 4]).unwrap();
            let f = ops::sum_all(&ops::sigmoid(&x).unwrap()).unwrap();
            let g = ops::sum_all(&ops::exp(&ops::scale(&x, 0.3).unwrap()).unwrap()).unwrap();
            let total = ops::add(&ops::scale(&f, wf).unwrap(), &ops::scale(&g, wg).unwrap()).unwrap();
            backward(&total).unwrap();
            x.grad().unwrap()
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combined = grad_of(2.5, -1.5);
        for i in 0..combined.len() {
            let expect = 2.5 * gf[i] - 1.5 * gg[i];
            assert!((combined[i] - expect).abs() < 1e-10);
        }
    }
}
