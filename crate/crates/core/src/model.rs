//! The shared-encoder / two-decoder network.
//!
//! A small ResNet10-style encoder is fully shared between an FCN8
//! segmentation decoder (score convs fused by addition, upsampled by
//! transposed convolutions) and a single-scale YOLO-v2-style detection head
//! reading the stride-32 features. Channel widths scale with `width_mult`
//! and the segmentation skip connections are individually removable, which
//! are the two architectural cost knobs.
//!
//! Encoder layout ("ResNet10" has no canonical definition; this is the
//! convention used throughout): a 7x7/s2 stem conv + 3x3/s2 maxpool, then
//! four basic residual blocks of two 3x3 convs each, blocks 2-4 entering at
//! stride 2 with a 1x1 projection shortcut. Feature taps after each block
//! give strides 4/8/16/32.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ops::{self, BnState, ConvSpec, Mode};
use crate::tensor::{read_ten, write_ten, Elem, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Minimum channel count after applying the width multiplier.
pub const MIN_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Head {
    #[serde(rename = "seg")]
    Seg,
    #[serde(rename = "det")]
    Det,
}

/// Declarative architecture description; one value fully determines the
/// parameter inventory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input resolution as (H, W); both divisible by 32.
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize),
    #[serde(default = "default_seg_classes")]
    pub seg_classes: Vec<String>,
    #[serde(default = "default_det_classes")]
    pub det_classes: Vec<String>,
    /// Channel width multiplier in (0, 1].
    #[serde(default = "default_width_mult")]
    pub width_mult: f64,
    #[serde(default = "default_base_widths")]
    pub base_widths: [usize; 4],
    /// Segmentation skip connections to keep (subset of {8, 16}).
    #[serde(default = "default_skip_strides")]
    pub skip_strides: Vec<usize>,
    /// Anchor (width, height) pairs in grid-cell units.
    #[serde(default = "default_anchors")]
    pub anchors: Vec<(f64, f64)>,
    #[serde(default = "default_heads")]
    pub heads: BTreeSet<Head>,
}

fn default_input_size() -> (usize, usize) {
    (384, 1280)
}
fn default_seg_classes() -> Vec<String> {
    ["background", "road", "sidewalk"].map(String::from).to_vec()
}
fn default_det_classes() -> Vec<String> {
    ["car", "person", "cyclist"].map(String::from).to_vec()
}
fn default_width_mult() -> f64 {
    1.0
}
fn default_base_widths() -> [usize; 4] {
    [64, 128, 256, 512]
}
fn default_skip_strides() -> Vec<usize> {
    vec![8, 16]
}
fn default_anchors() -> Vec<(f64, f64)> {
    vec![(1.0, 1.0), (2.0, 2.0), (4.0, 2.0), (2.0, 4.0), (6.0, 3.0)]
}
fn default_heads() -> BTreeSet<Head> {
    BTreeSet::from([Head::Seg, Head::Det])
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_size: default_input_size(),
            seg_classes: default_seg_classes(),
            det_classes: default_det_classes(),
            width_mult: default_width_mult(),
            base_widths: default_base_widths(),
            skip_strides: default_skip_strides(),
            anchors: default_anchors(),
            heads: default_heads(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be positive and divisible by 32"
            )));
        }
        if !(self.width_mult > 0.0 && self.width_mult <= 1.0) {
            return Err(Error::Config(format!(
                "width_mult {} must be in (0, 1]",
                self.width_mult
            )));
        }
        if self.heads.is_empty() {
            return Err(Error::Config("at least one head required".into()));
        }
        if self.heads.contains(&Head::Seg) && self.seg_classes.len() < 2 {
            return Err(Error::Config("need at least 2 segmentation classes".into()));
        }
        if self.heads.contains(&Head::Det) && self.anchors.is_empty() {
            return Err(Error::Config("need at least 1 anchor".into()));
        }
        if self.anchors.iter().any(|&(pw, ph)| pw <= 0.0 || ph <= 0.0) {
            return Err(Error::Config("anchor dims must be positive".into()));
        }
        for s in &self.skip_strides {
            if *s != 8 && *s != 16 {
                return Err(Error::Config(format!("skip stride {s} not in {{8, 16}}")));
            }
        }
        if self.base_widths.iter().any(|&b| b == 0) {
            return Err(Error::Config("base widths must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of width index `i` after the multiplier (ceil, floored
    /// at [`MIN_CHANNELS`]).
    pub fn width(&self, i: usize) -> usize {
        scale_width(self.base_widths[i], self.width_mult)
    }

    pub fn has_skip(&self, stride: usize) -> bool {
        self.skip_strides.contains(&stride)
    }

    pub fn det_out_channels(&self) -> usize {
        self.anchors.len() * (5 + self.det_classes.len())
    }

    /// Detection grid (Hg, Wg) for an input of (h, w).
    pub fn grid_for(&self, h: usize, w: usize) -> (usize, usize) {
        (h / 32, w / 32)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }
}

pub fn scale_width(base: usize, width_mult: f64) -> usize {
    ((base as f64 * width_mult).ceil() as usize).max(MIN_CHANNELS)
}

// ---------------------------------------------------------------------------
// Layer table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
    },
    Deconv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        ch: usize,
    },
}

/// One parameterized layer with its spatial geometry at the spec's input
/// size. The table is the single source of truth for parameter inventory,
/// initialization order and analytic cost counting.
#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub in_size: (usize, usize),
    pub out_size: (usize, usize),
}

impl Layer {
    /// Multiply-accumulates for one image at the table's resolution.
    pub fn macs(&self) -> u64 {
        let (oh, ow) = self.out_size;
        match &self.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => (out_ch * oh * ow * in_ch * kernel.0 * kernel.1) as u64,
            LayerKind::Deconv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let (ih, iw) = self.in_size;
                (ih * iw * in_ch * out_ch * kernel * kernel) as u64
            }
            // Folded scale+shift: one MAC per output element.
            LayerKind::BatchNorm { ch } => (ch * oh * ow) as u64,
        }
    }

    pub fn param_count(&self) -> u64 {
        match &self.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => (in_ch * out_ch * kernel.0 * kernel.1 + if *bias { *out_ch } else { 0 }) as u64,
            LayerKind::Deconv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => (in_ch * out_ch * kernel * kernel) as u64,
            LayerKind::BatchNorm { ch } => 2 * *ch as u64,
        }
    }

    /// Output activation element count for one image.
    pub fn activation_elems(&self) -> u64 {
        let (oh, ow) = self.out_size;
        let out_ch = match &self.kind {
            LayerKind::Conv { out_ch, .. } => *out_ch,
            LayerKind::Deconv { out_ch, .. } => *out_ch,
            LayerKind::BatchNorm { ch } => *ch,
        };
        (out_ch * oh * ow) as u64
    }
}

fn conv_layer(
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    s: usize,
    p: usize,
    bias: bool,
    in_size: (usize, usize),
) -> Layer {
    let out = (
        (in_size.0 + 2 * p - k) / s + 1,
        (in_size.1 + 2 * p - k) / s + 1,
    );
    Layer {
        name: name.to_string(),
        kind: LayerKind::Conv {
            in_ch,
            out_ch,
            kernel: (k, k),
            stride: (s, s),
            padding: (p, p),
            bias,
        },
        in_size,
        out_size: out,
    }
}

fn bn_layer(name: &str, ch: usize, size: (usize, usize)) -> Layer {
    Layer {
        name: name.to_string(),
        kind: LayerKind::BatchNorm { ch },
        in_size: size,
        out_size: size,
    }
}

fn deconv_layer(
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    s: usize,
    in_size: (usize, usize),
) -> Layer {
    Layer {
        name: name.to_string(),
        kind: LayerKind::Deconv {
            in_ch,
            out_ch,
            kernel: k,
            stride: s,
        },
        in_size,
        out_size: (in_size.0 * s, in_size.1 * s),
    }
}

/// Full parameterized-layer inventory implied by a [`ModelSpec`].
pub fn layer_table(spec: &ModelSpec) -> Vec<Layer> {
    let (h, w) = spec.input_size;
    let c = [spec.width(0), spec.width(1), spec.width(2), spec.width(3)];
    let mut layers = Vec::new();

    let s2 = (h / 2, w / 2);
    let s4 = (h / 4, w / 4);
    let s8 = (h / 8, w / 8);
    let s16 = (h / 16, w / 16);
    let s32 = (h / 32, w / 32);

    layers.push(conv_layer("stem.conv", 3, c[0], 7, 2, 3, false, (h, w)));
    layers.push(bn_layer("stem.bn", c[0], s2));
    // 3x3/s2 maxpool brings the stem to stride 4 (no parameters).

    let block = |layers: &mut Vec<Layer>,
                 idx: usize,
                 in_ch: usize,
                 out_ch: usize,
                 stride: usize,
                 in_size: (usize, usize),
                 out_size: (usize, usize)| {
        let p = format!("block{idx}");
        layers.push(conv_layer(
            &format!("{p}.conv1"),
            in_ch,
            out_ch,
            3,
            stride,
            1,
            false,
            in_size,
        ));
        layers.push(bn_layer(&format!("{p}.bn1"), out_ch, out_size));
        layers.push(conv_layer(
            &format!("{p}.conv2"),
            out_ch,
            out_ch,
            3,
            1,
            1,
            false,
            out_size,
        ));
        layers.push(bn_layer(&format!("{p}.bn2"), out_ch, out_size));
        if stride != 1 || in_ch != out_ch {
            layers.push(conv_layer(
                &format!("{p}.proj"),
                in_ch,
                out_ch,
                1,
                stride,
                0,
                false,
                in_size,
            ));
            layers.push(bn_layer(&format!("{p}.bnp"), out_ch, out_size));
        }
    };

    block(&mut layers, 1, c[0], c[0], 1, s4, s4);
    block(&mut layers, 2, c[0], c[1], 2, s4, s8);
    block(&mut layers, 3, c[1], c[2], 2, s8, s16);
    block(&mut layers, 4, c[2], c[3], 2, s16, s32);

    if spec.heads.contains(&Head::Seg) {
        let nc = spec.seg_classes.len();
        layers.push(conv_layer("seg.score32", c[3], nc, 1, 1, 0, true, s32));
        layers.push(deconv_layer("seg.up32", nc, nc, 2, 2, s32));
        if spec.has_skip(16) {
            layers.push(conv_layer("seg.score16", c[2], nc, 1, 1, 0, true, s16));
        }
        layers.push(deconv_layer("seg.up16", nc, nc, 2, 2, s16));
        if spec.has_skip(8) {
            layers.push(conv_layer("seg.score8", c[1], nc, 1, 1, 0, true, s8));
        }
        layers.push(deconv_layer("seg.up8", nc, nc, 16, 8, s8));
    }

    if spec.heads.contains(&Head::Det) {
        layers.push(conv_layer("det.conv", c[3], c[3], 3, 1, 1, false, s32));
        layers.push(bn_layer("det.bn", c[3], s32));
        layers.push(conv_layer(
            "det.head",
            c[3],
            spec.det_out_channels(),
            1,
            1,
            0,
            true,
            s32,
        ));
    }

    layers
}

/// Expected `(name, shape)` pairs of every checkpoint entry, in file order.
pub fn parameter_inventory(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let mut entries = Vec::new();
    for layer in layer_table(spec) {
        match layer.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                entries.push((
                    format!("{}.weight", layer.name),
                    vec![out_ch, in_ch, kernel.0, kernel.1],
                ));
                if bias {
                    entries.push((format!("{}.bias", layer.name), vec![out_ch]));
                }
            }
            LayerKind::Deconv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                entries.push((
                    format!("{}.weight", layer.name),
                    vec![in_ch, out_ch, kernel, kernel],
                ));
            }
            LayerKind::BatchNorm { ch } => {
                entries.push((format!("{}.gamma", layer.name), vec![ch]));
                entries.push((format!("{}.beta", layer.name), vec![ch]));
                entries.push((format!("{}.running_mean", layer.name), vec![ch]));
                entries.push((format!("{}.running_var", layer.name), vec![ch]));
            }
        }
    }
    entries
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named parameter store instantiated from a [`ModelSpec`].
///
/// Trainable tensors are leaves with `requires_grad = true`; batch-norm
/// running statistics live alongside and are serialized with the trainables.
pub struct ModelParams<T: Elem> {
    tensors: IndexMap<String, Tensor<T>>,
    bn_states: IndexMap<String, BnState<T>>,
}

impl<T: Elem> ModelParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn bn_state(&self, layer: &str) -> Result<&BnState<T>> {
        self.bn_states
            .get(layer)
            .ok_or_else(|| Error::Config(format!("missing bn state {layer}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn replace(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape("replace", format!("{name}: shape change rejected")));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn num_scalars(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.tensors.values() {
            t.zero_grad();
        }
    }

    /// Cheap snapshot sharing the immutable tensor buffers; batch-norm
    /// stats are value-copied since they mutate in place during training.
    pub fn snapshot_shared(&self) -> ModelParams<T> {
        ModelParams {
            tensors: self.tensors.clone(),
            bn_states: self
                .bn_states
                .iter()
                .map(|(k, v)| (k.clone(), v.clone_state()))
                .collect(),
        }
    }

    /// Detached snapshot (no gradient tracking) for evaluation.
    pub fn eval_snapshot(&self) -> ModelParams<T> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.detach()))
                .collect(),
            bn_states: self
                .bn_states
                .iter()
                .map(|(k, v)| (k.clone(), v.clone_state()))
                .collect(),
        }
    }
}

/// Deterministic seeded initialization: conv/deconv weights are He-normal
/// (`std = sqrt(2 / fan_in)` with `fan_in = in_ch*kh*kw`), biases zero,
/// batch-norm gamma 1 / beta 0 with running stats (0, 1). The same seed
/// gives bit-identical parameters.
pub fn build<T: Elem>(spec: &ModelSpec, seed: u64) -> Result<ModelParams<T>> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let mut tensors = IndexMap::new();
    let mut bn_states = IndexMap::new();

    for layer in layer_table(spec) {
        match layer.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_ch * kernel.0 * kernel.1;
                let std = (2.0 / fan_in as f64).sqrt();
                let n = out_ch * in_ch * kernel.0 * kernel.1;
                let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
                let w = Tensor::param(data, &[out_ch, in_ch, kernel.0, kernel.1])?;
                tensors.insert(format!("{}.weight", layer.name), w);
                if bias {
                    tensors.insert(
                        format!("{}.bias", layer.name),
                        Tensor::param(vec![T::zero(); out_ch], &[out_ch])?,
                    );
                }
            }
            LayerKind::Deconv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let fan_in = in_ch * kernel * kernel;
                let std = (2.0 / fan_in as f64).sqrt();
                let n = in_ch * out_ch * kernel * kernel;
                let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
                let w = Tensor::param(data, &[in_ch, out_ch, kernel, kernel])?;
                tensors.insert(format!("{}.weight", layer.name), w);
            }
            LayerKind::BatchNorm { ch } => {
                tensors.insert(
                    format!("{}.gamma", layer.name),
                    Tensor::param(vec![T::one(); ch], &[ch])?,
                );
                tensors.insert(
                    format!("{}.beta", layer.name),
                    Tensor::param(vec![T::zero(); ch], &[ch])?,
                );
                bn_states.insert(layer.name.clone(), BnState::new(ch));
            }
        }
    }

    Ok(ModelParams { tensors, bn_states })
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Encoder feature taps at strides 4/8/16/32.
pub struct EncoderFeatures<T: Elem> {
    pub f4: Tensor<T>,
    pub f8: Tensor<T>,
    pub f16: Tensor<T>,
    pub f32: Tensor<T>,
}

fn conv_bn_relu<T: Elem>(
    params: &ModelParams<T>,
    conv: &str,
    bn: &str,
    x: &Tensor<T>,
    spec: &ConvSpec,
    mode: Mode,
) -> Result<Tensor<T>> {
    let y = ops::conv2d(x, params.get(&format!("{conv}.weight"))?, None, spec)?;
    let y = ops::batchnorm2d(
        &y,
        params.get(&format!("{bn}.gamma"))?,
        params.get(&format!("{bn}.beta"))?,
        params.bn_state(bn)?,
        mode,
        BN_EPS,
        BN_MOMENTUM,
    )?;
    ops::relu(&y)
}

fn basic_block<T: Elem>(
    params: &ModelParams<T>,
    prefix: &str,
    x: &Tensor<T>,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    mode: Mode,
) -> Result<Tensor<T>> {
    let conv1 = ConvSpec {
        in_ch,
        out_ch,
        kernel: (3, 3),
        stride: (stride, stride),
        padding: (1, 1),
        has_bias: false,
    };
    let y = conv_bn_relu(
        params,
        &format!("{prefix}.conv1"),
        &format!("{prefix}.bn1"),
        x,
        &conv1,
        mode,
    )?;
    let conv2 = ConvSpec {
        in_ch: out_ch,
        out_ch,
        kernel: (3, 3),
        stride: (1, 1),
        padding: (1, 1),
        has_bias: false,
    };
    let y = ops::conv2d(&y, params.get(&format!("{prefix}.conv2.weight"))?, None, &conv2)?;
    let bn2 = format!("{prefix}.bn2");
    let y = ops::batchnorm2d(
        &y,
        params.get(&format!("{bn2}.gamma"))?,
        params.get(&format!("{bn2}.beta"))?,
        params.bn_state(&bn2)?,
        mode,
        BN_EPS,
        BN_MOMENTUM,
    )?;

    let shortcut = if stride != 1 || in_ch != out_ch {
        let proj = ConvSpec {
            in_ch,
            out_ch,
            kernel: (1, 1),
            stride: (stride, stride),
            padding: (0, 0),
            has_bias: false,
        };
        let s = ops::conv2d(x, params.get(&format!("{prefix}.proj.weight"))?, None, &proj)?;
        let bnp = format!("{prefix}.bnp");
        ops::batchnorm2d(
            &s,
            params.get(&format!("{bnp}.gamma"))?,
            params.get(&format!("{bnp}.beta"))?,
            params.bn_state(&bnp)?,
            mode,
            BN_EPS,
            BN_MOMENTUM,
        )?
    } else {
        x.clone()
    };

    ops::relu(&ops::add(&y, &shortcut)?)
}

/// Runs the shared encoder on `x: [N,3,H,W]` (H, W divisible by 32).
pub fn forward_encoder<T: Elem>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<EncoderFeatures<T>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape(
            "forward_encoder",
            format!("want [N,3,H,W], got {shape:?}"),
        ));
    }
    if shape[2] % 32 != 0 || shape[3] % 32 != 0 {
        return Err(Error::shape(
            "forward_encoder",
            format!("spatial dims {}x{} must be divisible by 32", shape[2], shape[3]),
        ));
    }
    let c = [spec.width(0), spec.width(1), spec.width(2), spec.width(3)];

    let stem_spec = ConvSpec {
        in_ch: 3,
        out_ch: c[0],
        kernel: (7, 7),
        stride: (2, 2),
        padding: (3, 3),
        has_bias: false,
    };
    let stem = conv_bn_relu(params, "stem.conv", "stem.bn", x, &stem_spec, mode)?;
    let pooled = ops::maxpool2d_padded(&stem, (3, 3), (2, 2), (1, 1))?;

    let f4 = basic_block(params, "block1", &pooled, c[0], c[0], 1, mode)?;
    let f8 = basic_block(params, "block2", &f4, c[0], c[1], 2, mode)?;
    let f16 = basic_block(params, "block3", &f8, c[1], c[2], 2, mode)?;
    let f32t = basic_block(params, "block4", &f16, c[2], c[3], 2, mode)?;

    Ok(EncoderFeatures {
        f4,
        f8,
        f16,
        f32: f32t,
    })
}

fn score_conv<T: Elem>(
    params: &ModelParams<T>,
    name: &str,
    x: &Tensor<T>,
    in_ch: usize,
    classes: usize,
) -> Result<Tensor<T>> {
    let spec = ConvSpec {
        in_ch,
        out_ch: classes,
        kernel: (1, 1),
        stride: (1, 1),
        padding: (0, 0),
        has_bias: true,
    };
    ops::conv2d(
        x,
        params.get(&format!("{name}.weight"))?,
        Some(params.get(&format!("{name}.bias"))?),
        &spec,
    )
}

/// FCN8 decoder: per-stride score maps fused by addition while upsampling
/// x2, x2, then x8 back to input resolution. Returns logits
/// `[N, |seg_classes|, H, W]`.
pub fn forward_seg<T: Elem>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    feats: &EncoderFeatures<T>,
) -> Result<Tensor<T>> {
    if !spec.heads.contains(&Head::Seg) {
        return Err(Error::Config("segmentation head not present in spec".into()));
    }
    let classes = spec.seg_classes.len();
    let score32 = score_conv(params, "seg.score32", &feats.f32, spec.width(3), classes)?;
    let mut up = ops::deconv2d(&score32, params.get("seg.up32.weight")?, 2)?;
    if spec.has_skip(16) {
        let score16 = score_conv(params, "seg.score16", &feats.f16, spec.width(2), classes)?;
        up = ops::add(&up, &score16)?;
    }
    up = ops::deconv2d(&up, params.get("seg.up16.weight")?, 2)?;
    if spec.has_skip(8) {
        let score8 = score_conv(params, "seg.score8", &feats.f8, spec.width(1), classes)?;
        up = ops::add(&up, &score8)?;
    }
    ops::deconv2d(&up, params.get("seg.up8.weight")?, 8)
}

/// YOLO-style detection head on the stride-32 features. Returns raw
/// (un-activated) predictions `[N, A*(5+C), H/32, W/32]`, per anchor ordered
/// `[tx, ty, tw, th, to, class logits...]`.
pub fn forward_det<T: Elem>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    feats: &EncoderFeatures<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    if !spec.heads.contains(&Head::Det) {
        return Err(Error::Config("detection head not present in spec".into()));
    }
    let c4 = spec.width(3);
    let conv = ConvSpec {
        in_ch: c4,
        out_ch: c4,
        kernel: (3, 3),
        stride: (1, 1),
        padding: (1, 1),
        has_bias: false,
    };
    let h = conv_bn_relu(params, "det.conv", "det.bn", &feats.f32, &conv, mode)?;
    let head = ConvSpec {
        in_ch: c4,
        out_ch: spec.det_out_channels(),
        kernel: (1, 1),
        stride: (1, 1),
        padding: (0, 0),
        has_bias: true,
    };
    ops::conv2d(
        &h,
        params.get("det.head.weight")?,
        Some(params.get("det.head.bias")?),
        &head,
    )
}

// ---------------------------------------------------------------------------
// Checkpoint I/O (".mtlw")
// ---------------------------------------------------------------------------

pub const MTLW_MAGIC: &[u8; 4] = b"MTLW";
pub const MTLW_VERSION: u32 = 1;

/// Serializes parameters (including running stats) in inventory order.
pub fn save_checkpoint<T: Elem, W: Write>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    mut out: W,
) -> Result<()> {
    let inventory = parameter_inventory(spec);
    out.write_all(MTLW_MAGIC)?;
    out.write_all(&MTLW_VERSION.to_le_bytes())?;
    out.write_all(&(inventory.len() as u32).to_le_bytes())?;
    for (name, shape) in &inventory {
        let tensor = checkpoint_entry(params, name, shape)?;
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        out.write_all(name_bytes)?;
        write_ten(&tensor, &mut out)?;
    }
    Ok(())
}

fn checkpoint_entry<T: Elem>(
    params: &ModelParams<T>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor<T>> {
    if let Some(layer) = name.strip_suffix(".running_mean") {
        return Tensor::from_vec(params.bn_state(layer)?.mean_vec(), shape);
    }
    if let Some(layer) = name.strip_suffix(".running_var") {
        return Tensor::from_vec(params.bn_state(layer)?.var_vec(), shape);
    }
    let t = params.get(name)?;
    if t.shape() != shape {
        return Err(Error::shape(
            "checkpoint",
            format!("{name}: stored {:?}, inventory wants {shape:?}", t.shape()),
        ));
    }
    Ok(t.detach())
}

/// Loads a checkpoint, validating the inventory exactly: no orphans, no
/// absences, shapes as implied by the spec.
pub fn load_checkpoint<T: Elem, R: Read>(spec: &ModelSpec, mut input: R) -> Result<ModelParams<T>> {
    spec.validate()?;
    let mut head = [0u8; 12];
    input.read_exact(&mut head)?;
    if &head[0..4] != MTLW_MAGIC {
        return Err(Error::format("mtlw", "bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != MTLW_VERSION {
        return Err(Error::format("mtlw", format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;

    let mut raw: IndexMap<String, Tensor<T>> = IndexMap::new();
    for _ in 0..count {
        let mut len_bytes = [0u8; 2];
        input.read_exact(&mut len_bytes)?;
        let name_len = u16::from_le_bytes(len_bytes) as usize;
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("mtlw", "entry name is not UTF-8"))?;
        let tensor = read_ten::<T, _>(&mut input)?;
        if raw.insert(name.clone(), tensor).is_some() {
            return Err(Error::format("mtlw", format!("duplicate entry {name}")));
        }
    }

    let inventory = parameter_inventory(spec);
    if raw.len() != inventory.len() {
        return Err(Error::format(
            "mtlw",
            format!("{} entries, inventory wants {}", raw.len(), inventory.len()),
        ));
    }

    let mut tensors = IndexMap::new();
    let mut bn_mean: IndexMap<String, Vec<T>> = IndexMap::new();
    let mut bn_var: IndexMap<String, Vec<T>> = IndexMap::new();
    for (name, shape) in &inventory {
        let t = raw
            .get(name)
            .ok_or_else(|| Error::format("mtlw", format!("missing entry {name}")))?;
        if t.shape() != shape {
            return Err(Error::format(
                "mtlw",
                format!("{name}: shape {:?}, want {shape:?}", t.shape()),
            ));
        }
        if let Some(layer) = name.strip_suffix(".running_mean") {
            bn_mean.insert(layer.to_string(), t.data().to_vec());
        } else if let Some(layer) = name.strip_suffix(".running_var") {
            bn_var.insert(layer.to_string(), t.data().to_vec());
        } else {
            tensors.insert(name.clone(), Tensor::param(t.data().to_vec(), shape)?);
        }
    }

    let mut bn_states = IndexMap::new();
    for (layer, mean) in bn_mean {
        let var = bn_var
            .shift_remove(&layer)
            .ok_or_else(|| Error::format("mtlw", format!("missing running_var for {layer}")))?;
        bn_states.insert(layer, BnState::from_vecs(mean, var)?);
    }

    Ok(ModelParams { tensors, bn_states })
}

pub fn save_checkpoint_file<T: Elem>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    save_checkpoint(params, spec, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint_file<T: Elem>(spec: &ModelSpec, path: &Path) -> Result<ModelParams<T>> {
    let bytes = std::fs::read(path)?;
    load_checkpoint(spec, bytes.as_slice())
}
