//! Reverse-mode differentiation.
//!
//! [`backward`] walks the recorded graph from a scalar loss in reverse
//! topological order, computing vector-Jacobian products per op and adding
//! the result into the grad slot of every reachable tensor that requires a
//! gradient. Running backward twice without [`Tensor::zero_grad`] therefore
//! accumulates, which is the documented contract.
//!
//! A single backward pass must not run concurrently with another pass over
//! the same graph (grad slots are the shared state).

use std::collections::{HashMap, HashSet};

use super::ops::{
    axis_spans, conv2d_backward, deconv2d_backward, sigmoid_scalar, softmax_lane, Op,
};
use super::{Elem, Tensor, TensorId};
use crate::error::{Error, Result};

/// Populates gradients of all reachable `requires_grad` tensors of the graph
/// that produced `loss`, which must be a single-element tensor.
pub fn backward<T: Elem>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::InvalidArg(format!(
            "backward: loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        // Nothing on the graph takes a gradient; an explicit no-op.
        return Ok(());
    }

    let order = topo_order(loss);
    let mut grads: HashMap<TensorId, Vec<T>> = HashMap::new();
    grads.insert(loss.id(), vec![T::one()]);

    for node in order.iter().rev() {
        let Some(gy) = grads.remove(&node.id()) else {
            continue;
        };
        node.accumulate_grad(&gy);
        propagate(node, &gy, &mut grads)?;
    }
    Ok(())
}

/// Tensors of the tracked graph in topological order (inputs before users).
fn topo_order<T: Elem>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut seen: HashSet<TensorId> = HashSet::new();
    // Iterative post-order DFS; the second stack element marks expansion.
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for input in node.op().inputs() {
            if input.requires_grad() && !seen.contains(&input.id()) {
                stack.push((input.clone(), false));
            }
        }
    }
    order
}

fn accum<T: Elem>(grads: &mut HashMap<TensorId, Vec<T>>, t: &Tensor<T>, delta: Vec<T>) {
    debug_assert_eq!(delta.len(), t.numel());
    grads
        .entry(t.id())
        .and_modify(|g| {
            for (gi, di) in g.iter_mut().zip(&delta) {
                *gi = *gi + *di;
            }
        })
        .or_insert(delta);
}

fn propagate<T: Elem>(
    node: &Tensor<T>,
    gy: &[T],
    grads: &mut HashMap<TensorId, Vec<T>>,
) -> Result<()> {
    match node.op() {
        Op::Leaf => {}

        Op::Conv2d { x, w, b, geom } => {
            let (dx, dw, db) = conv2d_backward(
                x,
                w,
                b.is_some() && b.as_ref().unwrap().requires_grad(),
                geom,
                gy,
                x.requires_grad(),
                w.requires_grad(),
            );
            if let Some(dx) = dx {
                accum(grads, x, dx);
            }
            if let Some(dw) = dw {
                accum(grads, w, dw);
            }
            if let (Some(db), Some(b)) = (db, b.as_ref()) {
                accum(grads, b, db);
            }
        }

        Op::Deconv2d { x, w, geom } => {
            let (dx, dw) =
                deconv2d_backward(x, w, geom, gy, x.requires_grad(), w.requires_grad());
            if let Some(dx) = dx {
                accum(grads, x, dx);
            }
            if let Some(dw) = dw {
                accum(grads, w, dw);
            }
        }

        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            invstd,
            train,
        } => {
            let (n, c, h, w) = {
                let s = x.shape();
                (s[0], s[1], s[2], s[3])
            };
            let plane = h * w;
            let m = (n * plane) as f64;
            // Per-channel reductions of gy and gy*xhat, fixed order.
            let mut s1 = vec![T::zero(); c];
            let mut s2 = vec![T::zero(); c];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * plane;
                    let mu = mean[ch];
                    let is = invstd[ch];
                    let mut a1 = T::zero();
                    let mut a2 = T::zero();
                    for (g, xv) in gy[base..base + plane].iter().zip(&x.data()[base..base + plane])
                    {
                        a1 = a1 + *g;
                        a2 = a2 + *g * (*xv - mu) * is;
                    }
                    s1[ch] = s1[ch] + a1;
                    s2[ch] = s2[ch] + a2;
                }
            }
            if beta.requires_grad() {
                accum(grads, beta, s1.clone());
            }
            if gamma.requires_grad() {
                accum(grads, gamma, s2.clone());
            }
            if x.requires_grad() {
                let inv_m = T::from_f64(1.0 / m);
                let mut dx = vec![T::zero(); x.numel()];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * plane;
                        let mu = mean[ch];
                        let is = invstd[ch];
                        let scale = gamma.data()[ch] * is;
                        if *train {
                            let c1 = s1[ch] * inv_m;
                            let c2 = s2[ch] * inv_m;
                            for i in base..base + plane {
                                let xhat = (x.data()[i] - mu) * is;
                                dx[i] = scale * (gy[i] - c1 - xhat * c2);
                            }
                        } else {
                            for i in base..base + plane {
                                dx[i] = scale * gy[i];
                            }
                        }
                    }
                }
                accum(grads, x, dx);
            }
        }

        Op::Relu { x } => {
            let dx = x
                .data()
                .iter()
                .zip(gy)
                .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
                .collect();
            accum(grads, x, dx);
        }

        Op::MaxPool2d { x, argmax } => {
            let mut dx = vec![T::zero(); x.numel()];
            for (out_idx, &src) in argmax.iter().enumerate() {
                dx[src] = dx[src] + gy[out_idx];
            }
            accum(grads, x, dx);
        }

        Op::Add { a, b } => {
            if a.requires_grad() {
                accum(grads, a, gy.to_vec());
            }
            if b.requires_grad() {
                accum(grads, b, gy.to_vec());
            }
        }

        Op::ConcatChannels { a, b } => {
            let (n, ca, h, w) = {
                let s = a.shape();
                (s[0], s[1], s[2], s[3])
            };
            let cb = b.shape()[1];
            let plane = h * w;
            if a.requires_grad() {
                let mut da = Vec::with_capacity(a.numel());
                for img in 0..n {
                    let base = img * (ca + cb) * plane;
                    da.extend_from_slice(&gy[base..base + ca * plane]);
                }
                accum(grads, a, da);
            }
            if b.requires_grad() {
                let mut db = Vec::with_capacity(b.numel());
                for img in 0..n {
                    let base = img * (ca + cb) * plane + ca * plane;
                    db.extend_from_slice(&gy[base..base + cb * plane]);
                }
                accum(grads, b, db);
            }
        }

        Op::Softmax { x, axis } => {
            // dx = y * (gy - sum(gy * y)) along the softmax axis.
            let y = node.data();
            let (outer, len, inner) = axis_spans(x.shape(), *axis);
            let mut dx = vec![T::zero(); x.numel()];
            for oi in 0..outer {
                for ii in 0..inner {
                    let base = oi * len * inner + ii;
                    let mut dot = T::zero();
                    for i in 0..len {
                        let idx = base + i * inner;
                        dot = dot + gy[idx] * y[idx];
                    }
                    for i in 0..len {
                        let idx = base + i * inner;
                        dx[idx] = y[idx] * (gy[idx] - dot);
                    }
                }
            }
            accum(grads, x, dx);
        }

        Op::Sigmoid { x } => {
            let y = node.data();
            let dx = y
                .iter()
                .zip(gy)
                .map(|(&yv, &g)| g * yv * (T::one() - yv))
                .collect();
            accum(grads, x, dx);
        }

        Op::Exp { x } => {
            let y = node.data();
            let dx = y.iter().zip(gy).map(|(&yv, &g)| g * yv).collect();
            accum(grads, x, dx);
        }

        Op::Scale { x, factor } => {
            let dx = gy.iter().map(|&g| g * *factor).collect();
            accum(grads, x, dx);
        }

        Op::SumAll { x } => {
            accum(grads, x, vec![gy[0]; x.numel()]);
        }

        Op::SegCrossEntropy {
            logits,
            labels,
            valid,
            valid_count,
        } => {
            let (n, c, h, w) = {
                let s = logits.shape();
                (s[0], s[1], s[2], s[3])
            };
            let plane = h * w;
            let gscale = gy[0] / T::from_f64(*valid_count as f64);
            let mut dx = vec![T::zero(); logits.numel()];
            let mut probs = vec![T::zero(); c];
            for img in 0..n {
                for py in 0..plane {
                    let p = img * plane + py;
                    if !valid[p] {
                        continue;
                    }
                    softmax_lane(logits.data(), img * c, plane, py, c, &mut probs);
                    let label = labels[p] as usize;
                    for ch in 0..c {
                        let target = if ch == label { T::one() } else { T::zero() };
                        dx[(img * c + ch) * plane + py] = gscale * (probs[ch] - target);
                    }
                }
            }
            accum(grads, logits, dx);
        }

        Op::DetSse {
            raw,
            assign,
            lambda_coord,
            lambda_noobj,
        } => {
            let (n, ch, hg, wg) = {
                let s = raw.shape();
                (s[0], s[1], s[2], s[3])
            };
            let a = assign.anchors;
            let c = assign.classes;
            let cells = hg * wg;
            let factor = gy[0] / T::from_f64(n as f64);
            let two = T::from_f64(2.0);
            let lc = T::from_f64(*lambda_coord);
            let lnb = T::from_f64(*lambda_noobj);
            let mut dx = vec![T::zero(); raw.numel()];
            let mut probs = vec![T::zero(); c];
            for img in 0..n {
                for ai in 0..a {
                    let ch0 = ai * (5 + c);
                    for cell in 0..cells {
                        let idx = |f: usize| (img * ch + ch0 + f) * cells + cell;
                        let t_idx = ((img * a + ai) * hg * wg) + cell;
                        let so = sigmoid_scalar(raw.data()[idx(4)]);
                        if assign.responsible[t_idx] {
                            let sx = sigmoid_scalar(raw.data()[idx(0)]);
                            let sy = sigmoid_scalar(raw.data()[idx(1)]);
                            dx[idx(0)] = factor
                                * lc
                                * two
                                * (sx - T::from_f64(assign.tx[t_idx]))
                                * sx
                                * (T::one() - sx);
                            dx[idx(1)] = factor
                                * lc
                                * two
                                * (sy - T::from_f64(assign.ty[t_idx]))
                                * sy
                                * (T::one() - sy);
                            dx[idx(2)] = factor
                                * lc
                                * two
                                * (raw.data()[idx(2)] - T::from_f64(assign.tw[t_idx]));
                            dx[idx(3)] = factor
                                * lc
                                * two
                                * (raw.data()[idx(3)] - T::from_f64(assign.th[t_idx]));
                            dx[idx(4)] =
                                factor * two * (so - T::one()) * so * (T::one() - so);
                            softmax_lane(raw.data(), img * ch + ch0 + 5, cells, cell, c, &mut probs);
                            // d/dz_k sum_c (p_c - y_c)^2 = 2 p_k (e_k - sum_c e_c p_c)
                            let mut dot = T::zero();
                            for (k, &p) in probs.iter().enumerate() {
                                let target = if k as u32 == assign.class_idx[t_idx] {
                                    T::one()
                                } else {
                                    T::zero()
                                };
                                dot = dot + (p - target) * p;
                            }
                            for (k, &p) in probs.iter().enumerate() {
                                let target = if k as u32 == assign.class_idx[t_idx] {
                                    T::one()
                                } else {
                                    T::zero()
                                };
                                dx[idx(5 + k)] = factor * two * p * ((p - target) - dot);
                            }
                        } else {
                            dx[idx(4)] = factor * lnb * two * so * so * (T::one() - so);
                        }
                    }
                }
            }
            accum(grads, raw, dx);
        }
    }
    Ok(())
}
