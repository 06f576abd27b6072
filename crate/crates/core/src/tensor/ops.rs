//! Differentiable tensor operations.
//!
//! Each op validates shapes, computes its output, and (when any input
//! requires a gradient) records an [`Op`] node so the backward pass can
//! compute vector-Jacobian products. Outputs of ops over inputs that do not
//! require gradients are plain leaves, which keeps inference graphs free.
//!
//! Internal parallelism runs over the batch dimension only; every output
//! element is reduced in a fixed serial order, so results do not depend on
//! thread count.

use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Convolution hyper-parameters (cross-correlation, zero padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub has_bias: bool,
}

impl ConvSpec {
    /// Output spatial dims: `floor((d + 2p - k)/s) + 1`, which must be >= 1.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::InvalidArg("conv spec: zero kernel/stride/channels".into()));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("non-positive output dims for input {h}x{w} with {self:?}"),
            ));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

/// Train/eval switch for batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance of one batch-norm layer.
///
/// Interior mutability keeps forward signatures uniform; a training stream
/// must hold exclusive access to the model (see the module contract), eval
/// forwards never write.
#[derive(Debug)]
pub struct BnState<T: Elem> {
    mean: Mutex<Vec<T>>,
    var: Mutex<Vec<T>>,
}

impl<T: Elem> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            mean: Mutex::new(vec![T::zero(); channels]),
            var: Mutex::new(vec![T::one(); channels]),
        }
    }

    pub fn from_vecs(mean: Vec<T>, var: Vec<T>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::InvalidArg("bn state: mean/var length mismatch".into()));
        }
        Ok(BnState {
            mean: Mutex::new(mean),
            var: Mutex::new(var),
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.lock().expect("bn lock").len()
    }

    pub fn mean_vec(&self) -> Vec<T> {
        self.mean.lock().expect("bn lock").clone()
    }

    pub fn var_vec(&self) -> Vec<T> {
        self.var.lock().expect("bn lock").clone()
    }

    pub fn clone_state(&self) -> Self {
        BnState {
            mean: Mutex::new(self.mean_vec()),
            var: Mutex::new(self.var_vec()),
        }
    }
}

/// Per-(image, anchor, cell) regression targets for the detection loss.
///
/// Flattened with index `((n * A + a) * Hg + gy) * Wg + gx`.
#[derive(Debug, Clone)]
pub struct DetAssignment {
    pub batch: usize,
    pub anchors: usize,
    pub classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub responsible: Vec<bool>,
    pub tx: Vec<f64>,
    pub ty: Vec<f64>,
    pub tw: Vec<f64>,
    pub th: Vec<f64>,
    pub class_idx: Vec<u32>,
    /// Ground-truth boxes that landed on an already-claimed (cell, anchor).
    pub collisions: usize,
}

impl DetAssignment {
    pub fn cells(&self) -> usize {
        self.batch * self.anchors * self.grid_h * self.grid_w
    }
}

pub(crate) enum Op<T: Elem> {
    Leaf,
    Conv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        b: Option<Tensor<T>>,
        geom: ConvGeom,
    },
    Deconv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        mean: Vec<T>,
        invstd: Vec<T>,
        train: bool,
    },
    Relu {
        x: Tensor<T>,
    },
    MaxPool2d {
        x: Tensor<T>,
        argmax: Vec<usize>,
    },
    Add {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    ConcatChannels {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Softmax {
        x: Tensor<T>,
        axis: usize,
    },
    Sigmoid {
        x: Tensor<T>,
    },
    Exp {
        x: Tensor<T>,
    },
    Scale {
        x: Tensor<T>,
        factor: T,
    },
    SumAll {
        x: Tensor<T>,
    },
    SegCrossEntropy {
        logits: Tensor<T>,
        labels: Arc<Vec<u8>>,
        valid: Arc<Vec<bool>>,
        valid_count: usize,
    },
    DetSse {
        raw: Tensor<T>,
        assign: Arc<DetAssignment>,
        lambda_coord: f64,
        lambda_noobj: f64,
    },
}

impl<T: Elem> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
            Op::Deconv2d { x, w, .. } => vec![x, w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Relu { x }
            | Op::MaxPool2d { x, .. }
            | Op::Softmax { x, .. }
            | Op::Sigmoid { x }
            | Op::Exp { x }
            | Op::Scale { x, .. }
            | Op::SumAll { x } => vec![x],
            Op::Add { a, b } | Op::ConcatChannels { a, b } => vec![a, b],
            Op::SegCrossEntropy { logits, .. } => vec![logits],
            Op::DetSse { raw, .. } => vec![raw],
        }
    }
}

fn dims4<T: Elem>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(Error::shape(op, format!("expected 4-D NCHW, got {other:?}"))),
    }
}

fn track<T: Elem>(inputs: &[&Tensor<T>]) -> bool {
    inputs.iter().any(|t| t.requires_grad())
}

fn finish<T: Elem>(
    data: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    tracked: bool,
    name: &'static str,
) -> Result<Tensor<T>> {
    let op = if tracked { op } else { Op::Leaf };
    Tensor::from_op(data, shape, tracked, op, name)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub(crate) fn conv_geom(spec: &ConvSpec, h: usize, w: usize) -> Result<ConvGeom> {
    let (oh, ow) = spec.out_dims(h, w)?;
    Ok(ConvGeom {
        channels: spec.in_ch,
        h,
        w,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        sh: spec.stride.0,
        sw: spec.stride.1,
        ph: spec.padding.0,
        pw: spec.padding.1,
        oh,
        ow,
    })
}

/// 2-D cross-correlation with zero padding, `x: [N,C,H,W]`, `w: [O,C,kh,kw]`.
pub fn conv2d<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, c, h, width) = dims4(x, "conv2d")?;
    let (o, wc, kh, kw) = dims4(w, "conv2d")?;
    if c != spec.in_ch || wc != spec.in_ch || o != spec.out_ch || (kh, kw) != spec.kernel {
        return Err(Error::shape(
            "conv2d",
            format!("x {:?} / w {:?} inconsistent with {spec:?}", x.shape(), w.shape()),
        ));
    }
    if spec.has_bias != b.is_some() {
        return Err(Error::shape("conv2d", "bias presence does not match spec"));
    }
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}, want [{o}]", b.shape())));
        }
    }
    let geom = conv_geom(spec, h, width)?;
    let (oh, ow) = (geom.oh, geom.ow);
    let plane = oh * ow;
    let ckk = geom.col_rows();

    let mut out = vec![T::zero(); n * o * plane];
    out.par_chunks_mut(o * plane)
        .zip(x.data().par_chunks(c * h * width))
        .for_each(|(out_n, x_n)| {
            let mut col = vec![T::zero(); ckk * plane];
            im2col(x_n, &geom, &mut col);
            gemm_nn(o, ckk, plane, w.data(), &col, out_n);
            if let Some(b) = b {
                for (oc, bias) in b.data().iter().enumerate() {
                    for v in &mut out_n[oc * plane..(oc + 1) * plane] {
                        *v = *v + *bias;
                    }
                }
            }
        });

    let tracked = track(&[x, w]) || b.map_or(false, |b| b.requires_grad());
    finish(
        out,
        vec![n, o, oh, ow],
        Op::Conv2d {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            geom,
        },
        tracked,
        "conv2d",
    )
}

/// Transposed convolution, `x: [N,C,H,W]`, `w: [C,O,kh,kw]`, square kernel.
///
/// Supported configurations: `kernel == stride` (no crop) and
/// `kernel == 2*stride` with even stride (implicit crop of `stride/2` per
/// side). Both produce an output exactly `stride` times larger.
pub fn deconv2d<T: Elem>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, width) = dims4(x, "deconv2d")?;
    let (wc, o, kh, kw) = dims4(w, "deconv2d")?;
    if wc != c {
        return Err(Error::shape(
            "deconv2d",
            format!("x channels {c} vs kernel in-channels {wc}"),
        ));
    }
    if kh != kw {
        return Err(Error::InvalidArg(format!("deconv2d: kernel must be square, got {kh}x{kw}")));
    }
    if stride == 0 || kh < stride {
        return Err(Error::InvalidArg(format!(
            "deconv2d: need kernel >= stride >= 1, got k={kh} s={stride}"
        )));
    }
    let crop = if kh == stride {
        0
    } else if kh == 2 * stride && stride % 2 == 0 {
        stride / 2
    } else {
        return Err(Error::InvalidArg(format!(
            "deconv2d: unsupported config k={kh} s={stride} (need k==s, or k==2s with even s)"
        )));
    };
    let (oh, ow) = (h * stride, width * stride);
    // The output grid plays the role of a conv input whose im2col has
    // `h x w` columns; `crop` acts as that conv's padding.
    let geom = ConvGeom {
        channels: o,
        h: oh,
        w: ow,
        kh,
        kw,
        sh: stride,
        sw: stride,
        ph: crop,
        pw: crop,
        oh: h,
        ow: width,
    };
    let okk = geom.col_rows();
    let cols = geom.col_cols();
    let mut out = vec![T::zero(); n * o * oh * ow];
    out.par_chunks_mut(o * oh * ow)
        .zip(x.data().par_chunks(c * h * width))
        .for_each(|(out_n, x_n)| {
            let mut col = vec![T::zero(); okk * cols];
            gemm_tn(okk, c, cols, w.data(), x_n, &mut col);
            col2im(&col, &geom, out_n);
        });

    let tracked = track(&[x, w]);
    finish(
        out,
        vec![n, o, oh, ow],
        Op::Deconv2d {
            x: x.clone(),
            w: w.clone(),
            geom,
        },
        tracked,
        "deconv2d",
    )
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Channel-wise batch normalization over `[N,C,H,W]`.
///
/// Train mode normalizes by biased batch statistics and folds them into the
/// running state as `run = (1-momentum)*run + momentum*batch` (unbiased
/// variance for the running update). Eval mode normalizes by the running
/// statistics and leaves them untouched.
pub fn batchnorm2d<T: Elem>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BnState<T>,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "batchnorm2d")?;
    if eps <= 0.0 {
        return Err(Error::InvalidArg(format!("batchnorm2d: eps must be > 0, got {eps}")));
    }
    if gamma.shape() != [c] || beta.shape() != [c] || state.channels() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!("gamma/beta/state must have {c} channels"),
        ));
    }
    let plane = h * w;
    let m = n * plane;
    let eps_t = T::from_f64(eps);

    let (mean, invstd) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum = T::zero();
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for &v in &x.data()[base..base + plane] {
                        sum = sum + v;
                    }
                }
                let mu = sum / T::from_f64(m as f64);
                let mut sq = T::zero();
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for &v in &x.data()[base..base + plane] {
                        let d = v - mu;
                        sq = sq + d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / T::from_f64(m as f64);
            }
            {
                let mom = T::from_f64(momentum);
                let keep = T::from_f64(1.0 - momentum);
                let mut rm = state.mean.lock().expect("bn lock");
                let mut rv = state.var.lock().expect("bn lock");
                let bessel = if m > 1 {
                    T::from_f64(m as f64 / (m as f64 - 1.0))
                } else {
                    T::one()
                };
                for ch in 0..c {
                    rm[ch] = keep * rm[ch] + mom * mean[ch];
                    rv[ch] = keep * rv[ch] + mom * var[ch] * bessel;
                }
            }
            let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            (mean, invstd)
        }
        Mode::Eval => {
            let mean = state.mean_vec();
            let invstd = state
                .var_vec()
                .iter()
                .map(|&v| T::one() / (v + eps_t).sqrt())
                .collect();
            (mean, invstd)
        }
    };

    let mut out = vec![T::zero(); x.numel()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let g = gamma.data()[ch];
            let b = beta.data()[ch];
            let mu = mean[ch];
            let is = invstd[ch];
            for (dst, &src) in out[base..base + plane].iter_mut().zip(&x.data()[base..base + plane])
            {
                *dst = g * (src - mu) * is + b;
            }
        }
    }

    let tracked = track(&[x, gamma, beta]);
    finish(
        out,
        x.shape().to_vec(),
        Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean,
            invstd,
            train: mode == Mode::Train,
        },
        tracked,
        "batchnorm2d",
    )
}

// ---------------------------------------------------------------------------
// Pointwise and structural ops
// ---------------------------------------------------------------------------

pub fn relu<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
    finish(
        out,
        x.shape().to_vec(),
        Op::Relu { x: x.clone() },
        track(&[x]),
        "relu",
    )
}

/// Max pooling without padding: windows always lie inside the input.
pub fn maxpool2d<T: Elem>(
    x: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    maxpool2d_padded(x, kernel, stride, (0, 0))
}

/// Max pooling with implicit negative-infinity padding (windows are clipped
/// to the valid region). Ties route the gradient to the first maximal
/// element in row-major window order.
pub fn maxpool2d_padded<T: Elem>(
    x: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "maxpool2d")?;
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(Error::InvalidArg("maxpool2d: zero kernel/stride".into()));
    }
    if ph >= kh || pw >= kw {
        return Err(Error::InvalidArg("maxpool2d: padding must be < kernel".into()));
    }
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::shape("maxpool2d", "window larger than padded input"));
    }
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;

    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            let in_base = (img * c + ch) * h * w;
            let out_base = (img * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy * sh) as isize - ph as isize;
                    let x0 = (ox * sw) as isize - pw as isize;
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..kh {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = in_base + iy as usize * w + ix as usize;
                            let v = x.data()[idx];
                            // Strict comparison keeps the first max on ties.
                            if best.map_or(true, |(bv, _)| v > bv) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.expect("window overlaps valid region");
                    out[out_base + oy * ow + ox] = v;
                    argmax[out_base + oy * ow + ox] = idx;
                }
            }
        }
    }

    finish(
        out,
        vec![n, c, oh, ow],
        Op::MaxPool2d { x: x.clone(), argmax },
        track(&[x]),
        "maxpool2d",
    )
}

/// Elementwise sum; shapes must match exactly (no broadcasting).
pub fn add<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    finish(
        out,
        a.shape().to_vec(),
        Op::Add { a: a.clone(), b: b.clone() },
        track(&[a, b]),
        "add",
    )
}

/// Concatenation along the channel axis of `[N,C,H,W]` tensors.
pub fn concat_channels<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = dims4(a, "concat_channels")?;
    let (nb, cb, hb, wb) = dims4(b, "concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity((ca + cb) * n * plane);
    for img in 0..n {
        out.extend_from_slice(&a.data()[img * ca * plane..(img + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[img * cb * plane..(img + 1) * cb * plane]);
    }
    finish(
        out,
        vec![n, ca + cb, h, w],
        Op::ConcatChannels { a: a.clone(), b: b.clone() },
        track(&[a, b]),
        "concat_channels",
    )
}

pub(crate) fn axis_spans(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Elem>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().len() {
        return Err(Error::InvalidArg(format!(
            "softmax: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_spans(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    for oi in 0..outer {
        for ii in 0..inner {
            let base = oi * len * inner + ii;
            let mut mx = x.data()[base];
            for i in 1..len {
                let v = x.data()[base + i * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = T::zero();
            for i in 0..len {
                let e = (x.data()[base + i * inner] - mx).exp();
                out[base + i * inner] = e;
                denom = denom + e;
            }
            for i in 0..len {
                out[base + i * inner] = out[base + i * inner] / denom;
            }
        }
    }
    finish(
        out,
        x.shape().to_vec(),
        Op::Softmax { x: x.clone(), axis },
        track(&[x]),
        "softmax",
    )
}

pub fn sigmoid<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let out = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    finish(
        out,
        x.shape().to_vec(),
        Op::Sigmoid { x: x.clone() },
        track(&[x]),
        "sigmoid",
    )
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Elem>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn exp<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let out = x.data().iter().map(|&v| v.exp()).collect();
    finish(
        out,
        x.shape().to_vec(),
        Op::Exp { x: x.clone() },
        track(&[x]),
        "exp",
    )
}

/// Multiply by a constant.
pub fn scale<T: Elem>(x: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    let f = T::from_f64(factor);
    let out = x.data().iter().map(|&v| v * f).collect();
    finish(
        out,
        x.shape().to_vec(),
        Op::Scale { x: x.clone(), factor: f },
        track(&[x]),
        "scale",
    )
}

/// Sum of all elements, as a rank-0 scalar.
pub fn sum_all<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut acc = T::zero();
    for &v in x.data() {
        acc = acc + v;
    }
    finish(
        vec![acc],
        Vec::new(),
        Op::SumAll { x: x.clone() },
        track(&[x]),
        "sum_all",
    )
}

// ---------------------------------------------------------------------------
// Loss heads (dedicated graph nodes with hand-derived adjoints)
// ---------------------------------------------------------------------------

/// Mean cross-entropy over valid pixels of `logits: [N,C,H,W]` against a
/// class-index map (`255` = ignore). `valid_mask`, when present, further
/// restricts the mean; masked pixels get exactly zero gradient.
pub fn seg_cross_entropy<T: Elem>(
    logits: &Tensor<T>,
    labels: &[u8],
    valid_mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(logits, "seg_cross_entropy")?;
    let pixels = n * h * w;
    if labels.len() != pixels {
        return Err(Error::shape(
            "seg_cross_entropy",
            format!("labels len {} vs {} pixels", labels.len(), pixels),
        ));
    }
    if let Some(m) = valid_mask {
        if m.len() != pixels {
            return Err(Error::shape(
                "seg_cross_entropy",
                format!("mask len {} vs {} pixels", m.len(), pixels),
            ));
        }
    }
    if c >= 255 {
        return Err(Error::InvalidArg("seg_cross_entropy: 255 is reserved for ignore".into()));
    }
    let mut valid = vec![false; pixels];
    let mut count = 0usize;
    for p in 0..pixels {
        let lab = labels[p];
        let ok = lab != 255 && valid_mask.map_or(true, |m| m[p]);
        if ok {
            if lab as usize >= c {
                return Err(Error::InvalidArg(format!(
                    "seg_cross_entropy: label {lab} out of range for {c} classes"
                )));
            }
            valid[p] = true;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArg(
            "seg_cross_entropy: no valid pixels, loss undefined".into(),
        ));
    }

    let plane = h * w;
    let mut total = T::zero();
    for img in 0..n {
        for py in 0..plane {
            let p = img * plane + py;
            if !valid[p] {
                continue;
            }
            let base = img * c * plane + py;
            let mut mx = logits.data()[base];
            for ch in 1..c {
                let v = logits.data()[base + ch * plane];
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = T::zero();
            for ch in 0..c {
                denom = denom + (logits.data()[base + ch * plane] - mx).exp();
            }
            let lse = mx + denom.ln();
            let truth = logits.data()[base + labels[p] as usize * plane];
            total = total + (lse - truth);
        }
    }
    let loss = total / T::from_f64(count as f64);

    finish(
        vec![loss],
        Vec::new(),
        Op::SegCrossEntropy {
            logits: logits.clone(),
            labels: Arc::new(labels.to_vec()),
            valid: Arc::new(valid),
            valid_count: count,
        },
        track(&[logits]),
        "seg_cross_entropy",
    )
}

/// YOLO-style sum-squared-error detection loss over raw head output
/// `[N, A*(5+C), Hg, Wg]`, normalized by batch size.
pub fn det_sse<T: Elem>(
    raw: &Tensor<T>,
    assign: &Arc<DetAssignment>,
    lambda_coord: f64,
    lambda_noobj: f64,
) -> Result<Tensor<T>> {
    let (n, ch, hg, wg) = dims4(raw, "det_sse")?;
    let a = assign.anchors;
    let c = assign.classes;
    if n != assign.batch || hg != assign.grid_h || wg != assign.grid_w || ch != a * (5 + c) {
        return Err(Error::shape(
            "det_sse",
            format!(
                "raw {:?} inconsistent with assignment (batch {}, {}x{}, {} anchors, {} classes)",
                raw.shape(),
                assign.batch,
                assign.grid_h,
                assign.grid_w,
                a,
                c
            ),
        ));
    }
    let lc = T::from_f64(lambda_coord);
    let ln = T::from_f64(lambda_noobj);
    let cells = hg * wg;
    let mut total = T::zero();
    let mut probs = vec![T::zero(); c];
    for img in 0..n {
        for ai in 0..a {
            let ch0 = ai * (5 + c);
            for cell in 0..cells {
                let at = |f: usize| raw.data()[(img * ch + ch0 + f) * cells + cell];
                let t_idx = ((img * a + ai) * hg * wg) + cell;
                let so = sigmoid_scalar(at(4));
                if assign.responsible[t_idx] {
                    let sx = sigmoid_scalar(at(0));
                    let sy = sigmoid_scalar(at(1));
                    let dx = sx - T::from_f64(assign.tx[t_idx]);
                    let dy = sy - T::from_f64(assign.ty[t_idx]);
                    let dw = at(2) - T::from_f64(assign.tw[t_idx]);
                    let dh = at(3) - T::from_f64(assign.th[t_idx]);
                    total = total + lc * (dx * dx + dy * dy + dw * dw + dh * dh);
                    let dob = so - T::one();
                    total = total + dob * dob;
                    softmax_lane(raw.data(), img * ch + ch0 + 5, cells, cell, c, &mut probs);
                    for (k, &p) in probs.iter().enumerate() {
                        let target = if k as u32 == assign.class_idx[t_idx] {
                            T::one()
                        } else {
                            T::zero()
                        };
                        let e = p - target;
                        total = total + e * e;
                    }
                } else {
                    total = total + ln * so * so;
                }
            }
        }
    }
    let loss = total / T::from_f64(n as f64);
    finish(
        vec![loss],
        Vec::new(),
        Op::DetSse {
            raw: raw.clone(),
            assign: Arc::clone(assign),
            lambda_coord,
            lambda_noobj,
        },
        track(&[raw]),
        "det_sse",
    )
}

/// Softmax of the `classes` channels starting at channel `ch_base`, for one
/// spatial cell of a channel-major buffer.
pub(crate) fn softmax_lane<T: Elem>(
    data: &[T],
    ch_base: usize,
    cells: usize,
    cell: usize,
    classes: usize,
    out: &mut [T],
) {
    let mut mx = data[ch_base * cells + cell];
    for k in 1..classes {
        let v = data[(ch_base + k) * cells + cell];
        if v > mx {
            mx = v;
        }
    }
    let mut denom = T::zero();
    for k in 0..classes {
        let e = (data[(ch_base + k) * cells + cell] - mx).exp();
        out[k] = e;
        denom = denom + e;
    }
    for v in out.iter_mut().take(classes) {
        *v = *v / denom;
    }
}

// ---------------------------------------------------------------------------
// Backward helpers shared with autograd
// ---------------------------------------------------------------------------

pub(crate) fn conv2d_backward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    geom: &ConvGeom,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let n = x.shape()[0];
    let o = w.shape()[0];
    let plane = geom.oh * geom.ow;
    let ckk = geom.col_rows();
    let img = geom.channels * geom.h * geom.w;

    let parts: Vec<(Vec<T>, Vec<T>)> = x
        .data()
        .par_chunks(img)
        .zip(dy.par_chunks(o * plane))
        .map(|(x_n, dy_n)| {
            let dx_n = if need_dx {
                // grad wrt input: scatter W^T * dy back through im2col.
                let mut dcol = vec![T::zero(); ckk * plane];
                gemm_tn(ckk, o, plane, w.data(), dy_n, &mut dcol);
                let mut dx_n = vec![T::zero(); img];
                col2im(&dcol, geom, &mut dx_n);
                dx_n
            } else {
                Vec::new()
            };
            let dw_n = if need_dw {
                // grad wrt weights: dy * col^T per image.
                let mut col = vec![T::zero(); ckk * plane];
                im2col(x_n, geom, &mut col);
                let mut dw_n = vec![T::zero(); o * ckk];
                gemm_nt(o, plane, ckk, dy_n, &col, &mut dw_n);
                dw_n
            } else {
                Vec::new()
            };
            (dx_n, dw_n)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(x.numel());
        for (dx_n, _) in &parts {
            dx.extend_from_slice(dx_n);
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); w.numel()];
        for (_, part) in &parts {
            for (d, p) in dw.iter_mut().zip(part) {
                *d = *d + *p;
            }
        }
        dw
    });

    let db = has_bias.then(|| {
        let mut db = vec![T::zero(); o];
        for img_i in 0..n {
            for oc in 0..o {
                let base = (img_i * o + oc) * plane;
                for &v in &dy[base..base + plane] {
                    db[oc] = db[oc] + v;
                }
            }
        }
        db
    });

    (dx, dw, db)
}

pub(crate) fn deconv2d_backward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeom,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let c = x.shape()[1];
    let img_in = c * geom.oh * geom.ow; // x spatial dims live in geom.oh/ow
    let img_out = geom.channels * geom.h * geom.w;
    let okk = geom.col_rows();
    let cols = geom.col_cols();

    let parts: Vec<(Vec<T>, Vec<T>)> = x
        .data()
        .par_chunks(img_in)
        .zip(dy.par_chunks(img_out))
        .map(|(x_n, dy_n)| {
            let mut dcol = vec![T::zero(); okk * cols];
            im2col(dy_n, geom, &mut dcol);
            let dx_n = if need_dx {
                let mut dx_n = vec![T::zero(); img_in];
                gemm_nn(c, okk, cols, w.data(), &dcol, &mut dx_n);
                dx_n
            } else {
                Vec::new()
            };
            let dw_n = if need_dw {
                let mut dw_n = vec![T::zero(); w.numel()];
                gemm_nt(c, cols, okk, x_n, &dcol, &mut dw_n);
                dw_n
            } else {
                Vec::new()
            };
            (dx_n, dw_n)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(x.numel());
        for (dx_n, _) in &parts {
            dx.extend_from_slice(dx_n);
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); w.numel()];
        for (_, part) in &parts {
            for (d, p) in dw.iter_mut().zip(part) {
                *d = *d + *p;
            }
        }
        dw
    });
    (dx, dw)
}
