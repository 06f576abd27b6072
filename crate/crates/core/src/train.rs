//! ADAM optimization, the training loop, and the STL/MTL comparison
//! harness.
//!
//! Everything is deterministic given the experiment config: parameter init
//! comes from the model seed, batch order from keyed per-epoch shuffles,
//! and all tensor math has fixed reduction order, so re-running a config
//! reproduces loss logs and checkpoints bit for bit.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{self, RawSample, SceneConfig};
use crate::error::{Error, Result};
use crate::loss::{self, DetLambdas, GtBox, LossWeights};
use crate::metrics::{
    self, accumulate_confusion, det_ap, seg_iou, ColumnResults, ConfusionMatrix, DetApReport,
    GtDet, ResultsTable, SegIouReport, STUDY_COLUMNS,
};
use crate::model::{self, Head, ModelParams, ModelSpec};
use crate::postproc::{self, BoxPx};
use crate::rng::Rng;
use crate::tensor::autograd::backward;
use crate::tensor::ops::{self, Mode};
use crate::tensor::{Elem, Tensor};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    0.0005
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    8
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if self.eps <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("eps and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates per parameter plus the step counter.
pub struct AdamState<T: Elem> {
    pub step: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Elem> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let m = params
            .tensors()
            .map(|(n, t)| (n.to_string(), vec![T::zero(); t.numel()]))
            .collect();
        let v = params
            .tensors()
            .map(|(n, t)| (n.to_string(), vec![T::zero(); t.numel()]))
            .collect();
        AdamState { step: 0, m, v }
    }
}

/// One ADAM update: `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// bias-corrected, `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
/// Parameters without a gradient are treated as having zero gradient.
/// Non-finite gradients abort with the offending parameter named.
pub fn adam_step<T: Elem>(
    params: &mut ModelParams<T>,
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    cfg.validate()?;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let nb1 = T::from_f64(1.0 - cfg.beta1);
    let nb2 = T::from_f64(1.0 - cfg.beta2);
    let lr = T::from_f64(cfg.lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(cfg.eps);

    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let tensor = params.get(&name)?;
        let grad = tensor.grad().unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        let m = state
            .m
            .get_mut(&name)
            .ok_or_else(|| Error::Config(format!("adam state missing {name}")))?;
        let v = state
            .v
            .get_mut(&name)
            .ok_or_else(|| Error::Config(format!("adam state missing {name}")))?;
        let mut updated = tensor.data().to_vec();
        for i in 0..updated.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + nb1 * g;
            v[i] = b2 * v[i] + nb2 * g * g;
            let v_hat = v[i] * inv_bc2;
            updated[i] = updated[i] - lr * m[i] / (v_hat.sqrt() + eps);
        }
        let shape = tensor.shape().to_vec();
        params.replace(&name, Tensor::param(updated, &shape)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "STL_Seg")]
    StlSeg,
    #[serde(rename = "STL_Det")]
    StlDet,
    #[serde(rename = "MTL")]
    Mtl,
    #[serde(rename = "MTL_10")]
    Mtl10,
    #[serde(rename = "MTL_100")]
    Mtl100,
    #[serde(rename = "custom")]
    Custom,
}

impl ExperimentKind {
    /// (heads, loss weights) the kind pins down; `None` for custom.
    pub fn protocol(self) -> Option<(Vec<Head>, LossWeights)> {
        let w = |ws, wd| LossWeights { w_seg: ws, w_det: wd };
        match self {
            ExperimentKind::StlSeg => Some((vec![Head::Seg], w(1.0, 0.0))),
            ExperimentKind::StlDet => Some((vec![Head::Det], w(0.0, 1.0))),
            ExperimentKind::Mtl => Some((vec![Head::Seg, Head::Det], w(1.0, 1.0))),
            ExperimentKind::Mtl10 => Some((vec![Head::Seg, Head::Det], w(10.0, 1.0))),
            ExperimentKind::Mtl100 => Some((vec![Head::Seg, Head::Det], w(100.0, 1.0))),
            ExperimentKind::Custom => None,
        }
    }

    pub fn column_name(self) -> &'static str {
        match self {
            ExperimentKind::StlSeg => "STL Seg",
            ExperimentKind::StlDet => "STL Det",
            ExperimentKind::Mtl => "MTL",
            ExperimentKind::Mtl10 => "MTL_10",
            ExperimentKind::Mtl100 => "MTL_100",
            ExperimentKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    pub model: ModelSpec,
    pub weights: LossWeights,
    #[serde(default)]
    pub lambdas: DetLambdas,
    pub optimizer: OptimizerConfig,
    pub train_dir: PathBuf,
    #[serde(default)]
    pub eval_dir: Option<PathBuf>,
    /// Steps between eval snapshots; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// Rows above this index are masked out of loss, metrics and output.
    #[serde(default)]
    pub horizon_row: Option<usize>,
    #[serde(default = "default_score_thresh")]
    pub score_thresh: f64,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    #[serde(default = "default_map_iou")]
    pub map_iou: f64,
}

fn default_score_thresh() -> f64 {
    0.25
}
fn default_nms_iou() -> f64 {
    0.45
}
fn default_map_iou() -> f64 {
    0.5
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        if let Some((heads, weights)) = self.kind.protocol() {
            let want: std::collections::BTreeSet<Head> = heads.into_iter().collect();
            if self.model.heads != want {
                return Err(Error::Config(format!(
                    "{:?} requires heads {want:?}, got {:?}",
                    self.kind, self.model.heads
                )));
            }
            if self.weights != weights {
                return Err(Error::Config(format!(
                    "{:?} requires weights {weights:?}, got {:?}",
                    self.kind, self.weights
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Anchor set matched to the synthetic object shapes, in grid-cell units.
pub fn synthetic_anchors() -> Vec<(f64, f64)> {
    vec![
        (0.70, 0.50),
        (0.28, 0.75),
        (0.78, 0.38),
        (0.45, 0.45),
        (1.00, 0.85),
    ]
}

/// Model spec tuned for the synthetic benchmark at the given size/width.
pub fn synthetic_model_spec(size: (usize, usize), width_mult: f64) -> ModelSpec {
    ModelSpec {
        input_size: size,
        width_mult,
        anchors: synthetic_anchors(),
        ..ModelSpec::default()
    }
}

/// Builds one Table-style column experiment over a shared dataset.
pub fn experiment_for_kind(
    kind: ExperimentKind,
    base_model: &ModelSpec,
    optimizer: OptimizerConfig,
    train_dir: PathBuf,
    eval_dir: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    let (heads, weights) = kind
        .protocol()
        .ok_or_else(|| Error::Config("custom experiments need explicit configuration".into()))?;
    let model = ModelSpec {
        heads: heads.into_iter().collect(),
        ..base_model.clone()
    };
    let cfg = ExperimentConfig {
        name: kind.column_name().to_string(),
        kind,
        model,
        weights,
        lambdas: DetLambdas::default(),
        optimizer,
        train_dir,
        eval_dir,
        eval_every: 0,
        horizon_row: None,
        score_thresh: default_score_thresh(),
        nms_iou: default_nms_iou(),
        map_iou: default_map_iou(),
    };
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub l_seg: Option<f64>,
    pub l_det: Option<f64>,
    pub l_total: f64,
    pub w_seg: f64,
    pub w_det: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub seg: Option<SegIouReport>,
    pub det: Option<DetApReport>,
}

pub struct TrainOutcome<T: Elem> {
    pub params: ModelParams<T>,
    pub loss_log: Vec<LossRow>,
    pub eval_history: Vec<(usize, EvalResult)>,
    pub diverged: bool,
}

fn batch_tensors<T: Elem>(
    samples: &[RawSample],
    indices: &[usize],
) -> Result<(Tensor<T>, Vec<u8>, Vec<Vec<GtBox>>)> {
    let first = &samples[indices[0]];
    let (w, h) = (first.width, first.height);
    let plane = w * h;
    let mut image = vec![T::zero(); indices.len() * 3 * plane];
    let mut labels = Vec::with_capacity(indices.len() * plane);
    let mut boxes = Vec::with_capacity(indices.len());
    for (bi, &si) in indices.iter().enumerate() {
        let s = &samples[si];
        if s.width != w || s.height != h {
            return Err(Error::shape("batch", "mixed sample sizes"));
        }
        let base = bi * 3 * plane;
        for p in 0..plane {
            for c in 0..3 {
                image[base + c * plane + p] = T::from_f64(s.rgb[p * 3 + c] as f64 / 255.0);
            }
        }
        labels.extend_from_slice(&s.seg);
        boxes.push(s.boxes.clone());
    }
    let image = Tensor::from_vec(image, &[indices.len(), 3, h, w])?;
    Ok((image, labels, boxes))
}

fn horizon_mask(h: usize, w: usize, batch: usize, horizon_row: Option<usize>) -> Option<Vec<bool>> {
    horizon_row.map(|row| {
        let mut mask = vec![true; batch * h * w];
        for img in 0..batch {
            for y in 0..row.min(h) {
                for x in 0..w {
                    mask[img * h * w + y * w + x] = false;
                }
            }
        }
        mask
    })
}

/// Deterministic keyed shuffling: batch `step` takes the next
/// `batch_size` indices of per-epoch permutations.
pub fn batch_indices(n_samples: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n_samples.max(1);
    let start = step * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = start / per_epoch;
    let mut offset = start % per_epoch;
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = Rng::keyed(seed, 0xDA7A_0000 ^ epoch as u64);
    rng.shuffle(&mut order);
    for _ in 0..batch_size {
        if offset >= per_epoch {
            epoch += 1;
            offset = 0;
            order = (0..n_samples).collect();
            let mut rng = Rng::keyed(seed, 0xDA7A_0000 ^ epoch as u64);
            rng.shuffle(&mut order);
        }
        out.push(order[offset]);
        offset += 1;
    }
    out
}

/// Runs one experiment end to end. When `out_dir` is given, writes
/// `loss.csv`, `eval.csv`, `model.json` and `final.mtlw` there.
pub fn train<T: Elem>(exp: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    exp.validate()?;
    let (_, samples) = data::load_dataset(&exp.train_dir)?;
    if samples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let (want_h, want_w) = exp.model.input_size;
    if samples[0].height != want_h || samples[0].width != want_w {
        return Err(Error::Config(format!(
            "dataset size {}x{} does not match model input {}x{}",
            samples[0].height, samples[0].width, want_h, want_w
        )));
    }
    let eval_samples = match &exp.eval_dir {
        Some(dir) => Some(data::load_dataset(dir)?.1),
        None => None,
    };

    let has_seg = exp.model.heads.contains(&Head::Seg);
    let has_det = exp.model.heads.contains(&Head::Det);
    let grid = exp.model.grid_for(want_h, want_w);
    let det_classes = exp.model.det_classes.len();

    let mut params = model::build::<T>(&exp.model, exp.optimizer.seed)?;
    let mut state = AdamState::new(&params);
    let mut loss_log = Vec::with_capacity(exp.optimizer.steps);
    let mut eval_history = Vec::new();
    let mut last_good = params.snapshot_shared();
    let mut diverged = false;

    for step in 0..exp.optimizer.steps {
        let indices = batch_indices(samples.len(), exp.optimizer.batch_size, exp.optimizer.seed, step);
        let (image, labels, boxes) = batch_tensors::<T>(&samples, &indices)?;
        let mask = horizon_mask(want_h, want_w, indices.len(), exp.horizon_row);

        let feats = model::forward_encoder(&params, &exp.model, &image, Mode::Train)?;
        let mut l_seg_value = None;
        let mut l_det_value = None;
        let total = match (has_seg, has_det) {
            (true, true) => {
                let logits = model::forward_seg(&params, &exp.model, &feats)?;
                let l_seg = loss::seg_loss(&logits, &labels, mask.as_deref())?;
                let raw = model::forward_det(&params, &exp.model, &feats, Mode::Train)?;
                let assign = loss::assign_targets(&boxes, grid, &exp.model.anchors, det_classes)?;
                let l_det = loss::det_loss(&raw, &assign, exp.lambdas)?;
                l_seg_value = Some(l_seg.item().as_f64());
                l_det_value = Some(l_det.item().as_f64());
                loss::mtl_loss(&l_seg, &l_det, exp.weights)?
            }
            (true, false) => {
                let logits = model::forward_seg(&params, &exp.model, &feats)?;
                let l_seg = loss::seg_loss(&logits, &labels, mask.as_deref())?;
                l_seg_value = Some(l_seg.item().as_f64());
                ops::scale(&l_seg, exp.weights.w_seg)?
            }
            (false, true) => {
                let raw = model::forward_det(&params, &exp.model, &feats, Mode::Train)?;
                let assign = loss::assign_targets(&boxes, grid, &exp.model.anchors, det_classes)?;
                let l_det = loss::det_loss(&raw, &assign, exp.lambdas)?;
                l_det_value = Some(l_det.item().as_f64());
                ops::scale(&l_det, exp.weights.w_det)?
            }
            (false, false) => return Err(Error::Config("no heads enabled".into())),
        };

        let l_total = total.item().as_f64();
        if !l_total.is_finite() {
            diverged = true;
            params = last_good;
            break;
        }
        backward(&total)?;
        adam_step(&mut params, &mut state, &exp.optimizer)?;
        last_good = params.snapshot_shared();

        loss_log.push(LossRow {
            step,
            l_seg: l_seg_value,
            l_det: l_det_value,
            l_total,
            w_seg: exp.weights.w_seg,
            w_det: exp.weights.w_det,
        });

        if exp.eval_every > 0 && (step + 1) % exp.eval_every == 0 {
            if let Some(eval) = &eval_samples {
                let result = evaluate::<T>(&params.eval_snapshot(), exp, eval)?;
                eval_history.push((step + 1, result));
            }
        }
    }

    if let Some(eval) = &eval_samples {
        let result = evaluate::<T>(&params.eval_snapshot(), exp, eval)?;
        eval_history.push((exp.optimizer.steps, result));
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("loss.csv"), loss_csv(&loss_log))?;
        std::fs::write(dir.join("eval.csv"), eval_csv(&eval_history))?;
        std::fs::write(dir.join("model.json"), exp.model.to_json_pretty()?)?;
        model::save_checkpoint_file(&params, &exp.model, &dir.join("final.mtlw"))?;
    }

    Ok(TrainOutcome {
        params,
        loss_log,
        eval_history,
        diverged,
    })
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,L_seg,L_det,L_total,w_seg,w_det\n");
    for r in rows {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            fmt(r.l_seg),
            fmt(r.l_det),
            r.l_total,
            r.w_seg,
            r.w_det
        ));
    }
    out
}

pub fn eval_csv(history: &[(usize, EvalResult)]) -> String {
    let mut out = String::from("step,mean_iou,mean_ap\n");
    for (step, r) in history {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{}\n",
            step,
            fmt(r.seg.as_ref().and_then(|s| s.mean)),
            fmt(r.det.as_ref().and_then(|d| d.mean)),
        ));
    }
    out
}

/// Evaluates a parameter snapshot on a sample set: confusion-matrix IoU for
/// the segmentation head, decode + NMS + AP for the detection head.
pub fn evaluate<T: Elem>(
    params: &ModelParams<T>,
    exp: &ExperimentConfig,
    samples: &[RawSample],
) -> Result<EvalResult> {
    let has_seg = exp.model.heads.contains(&Head::Seg);
    let has_det = exp.model.heads.contains(&Head::Det);
    let seg_classes = exp.model.seg_classes.len();
    let det_classes = exp.model.det_classes.len();

    let mut cm = ConfusionMatrix::new(seg_classes);
    let mut all_dets: Vec<Vec<postproc::Detection>> = Vec::new();
    let mut all_gts: Vec<Vec<GtDet>> = Vec::new();

    for chunk in samples.chunks(exp.optimizer.batch_size.max(1)) {
        let indices: Vec<usize> = (0..chunk.len()).collect();
        let (image, labels, boxes) = batch_tensors::<T>(chunk, &indices)?;
        let (h, w) = (chunk[0].height, chunk[0].width);
        let feats = model::forward_encoder(params, &exp.model, &image, Mode::Eval)?;

        if has_seg {
            let logits = model::forward_seg(params, &exp.model, &feats)?;
            let masks = postproc::seg_argmax(&logits, exp.horizon_row)?;
            for (bi, mask) in masks.iter().enumerate() {
                let gt = &labels[bi * h * w..(bi + 1) * h * w];
                accumulate_confusion(mask, gt, &mut cm)?;
            }
        }
        if has_det {
            let raw = model::forward_det(params, &exp.model, &feats, Mode::Eval)?;
            let decoded = postproc::decode_boxes(&raw, &exp.model.anchors, det_classes, (w, h))?;
            for (bi, dets) in decoded.into_iter().enumerate() {
                all_dets.push(postproc::nms(&dets, exp.nms_iou, exp.score_thresh));
                all_gts.push(
                    boxes[bi]
                        .iter()
                        .map(|b| GtDet {
                            class_idx: b.class_idx,
                            bbox: BoxPx {
                                x1: (b.cx - b.w / 2.0) * w as f64,
                                y1: (b.cy - b.h / 2.0) * h as f64,
                                x2: (b.cx + b.w / 2.0) * w as f64,
                                y2: (b.cy + b.h / 2.0) * h as f64,
                            },
                        })
                        .collect(),
                );
            }
        }
    }

    Ok(EvalResult {
        seg: has_seg.then(|| seg_iou(&cm)),
        det: if has_det {
            Some(det_ap(&all_dets, &all_gts, det_classes, exp.map_iou)?)
        } else {
            None
        },
    })
}

// ---------------------------------------------------------------------------
// Study harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Base architecture; heads are overridden per column.
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub scene: SceneConfig,
    #[serde(default = "default_train_count")]
    pub train_count: u64,
    #[serde(default = "default_eval_count")]
    pub eval_count: u64,
    /// Model/data seeds; one run per (column, seed), medians reported.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_train_count() -> u64 {
    512
}
fn default_eval_count() -> u64 {
    128
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

impl StudyConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: StudyConfig = serde_json::from_str(json)?;
        cfg.model.validate()?;
        cfg.optimizer.validate()?;
        cfg.scene.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
pub struct StudyOutcome {
    pub table: ResultsTable,
    /// Observed L_seg / L_det ratio (median over MTL training steps).
    pub seg_det_loss_ratio: Option<f64>,
    /// (run name, error) for columns that failed; successful columns
    /// proceed regardless.
    pub failures: Vec<(String, String)>,
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn median_of_options(values: Vec<Option<f64>>) -> Option<f64> {
    let mut defined: Vec<f64> = values.into_iter().flatten().collect();
    median(&mut defined)
}

/// Runs the five-column comparison protocol: shared train/eval datasets,
/// every column trained for every seed, per-metric medians across seeds,
/// and the Table-schema report written to `results.csv` / `results.json`.
pub fn run_study<T: Elem>(study: &StudyConfig, out_dir: &Path) -> Result<StudyOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let train_dir = out_dir.join("data_train");
    let eval_dir = out_dir.join("data_eval");
    if !train_dir.join("meta.json").exists() {
        data::write_dataset(&study.scene, study.train_count, &train_dir)?;
    }
    if !eval_dir.join("meta.json").exists() {
        let eval_scene = SceneConfig {
            seed: study.scene.seed ^ 0x5EED_E7A1,
            ..study.scene.clone()
        };
        data::write_dataset(&eval_scene, study.eval_count, &eval_dir)?;
    }

    let kinds = [
        ExperimentKind::StlSeg,
        ExperimentKind::StlDet,
        ExperimentKind::Mtl,
        ExperimentKind::Mtl10,
        ExperimentKind::Mtl100,
    ];
    let mut failures = Vec::new();
    let mut ratio_samples: Vec<f64> = Vec::new();
    let mut columns: Vec<(String, ColumnResults)> = Vec::new();

    for kind in kinds {
        let mut seg_runs: Vec<SegIouReport> = Vec::new();
        let mut det_runs: Vec<DetApReport> = Vec::new();
        for &seed in &study.seeds {
            let run_name = format!("{}_seed{}", kind.column_name().replace(' ', "_"), seed);
            let optimizer = OptimizerConfig {
                seed,
                ..study.optimizer.clone()
            };
            let exp = experiment_for_kind(
                kind,
                &study.model,
                optimizer,
                train_dir.clone(),
                Some(eval_dir.clone()),
            )?;
            let run_dir = out_dir.join(&run_name);
            match train::<T>(&exp, Some(&run_dir)) {
                Ok(outcome) => {
                    if kind == ExperimentKind::Mtl {
                        for row in &outcome.loss_log {
                            if let (Some(s), Some(d)) = (row.l_seg, row.l_det) {
                                if d > 0.0 {
                                    ratio_samples.push(s / d);
                                }
                            }
                        }
                    }
                    if let Some((_, result)) = outcome.eval_history.last() {
                        if let Some(seg) = &result.seg {
                            seg_runs.push(seg.clone());
                        }
                        if let Some(det) = &result.det {
                            det_runs.push(det.clone());
                        }
                    }
                }
                Err(e) => failures.push((run_name, e.to_string())),
            }
        }

        let seg = (!seg_runs.is_empty()).then(|| {
            let classes = seg_runs[0].per_class.len();
            let per_class: Vec<Option<f64>> = (0..classes)
                .map(|c| median_of_options(seg_runs.iter().map(|r| r.per_class[c]).collect()))
                .collect();
            let mean = median_of_options(seg_runs.iter().map(|r| r.mean).collect());
            SegIouReport { per_class, mean }
        });
        let det = (!det_runs.is_empty()).then(|| {
            let classes = det_runs[0].per_class.len();
            let per_class: Vec<Option<f64>> = (0..classes)
                .map(|c| median_of_options(det_runs.iter().map(|r| r.per_class[c]).collect()))
                .collect();
            let mean = median_of_options(det_runs.iter().map(|r| r.mean).collect());
            DetApReport { per_class, mean }
        });
        columns.push((kind.column_name().to_string(), ColumnResults { seg, det }));
    }

    debug_assert_eq!(
        columns.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
        STUDY_COLUMNS.to_vec()
    );

    let table = metrics::report_table(
        &columns,
        &study.model.seg_classes,
        &study.model.det_classes,
    )?;
    let seg_det_loss_ratio = median(&mut ratio_samples);
    let outcome = StudyOutcome {
        table,
        seg_det_loss_ratio,
        failures,
    };

    std::fs::write(out_dir.join("results.csv"), outcome.table.to_csv())?;
    std::fs::write(
        out_dir.join("results.json"),
        serde_json::to_string_pretty(&outcome)?,
    )?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build;

    fn tiny_optimizer(steps: usize, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps,
            batch_size: 4,
            seed,
        }
    }

    #[test]
    fn adam_zero_gradient_only_advances_the_step_counter() {
        let spec = synthetic_model_spec((32, 32), 0.25);
        let mut params = build::<f64>(&spec, 1).unwrap();
        let mut bytes_before = Vec::new();
        model::save_checkpoint(&params, &spec, &mut bytes_before).unwrap();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, &tiny_optimizer(1, 1)).unwrap();
        assert_eq!(state.step, 1);
        let mut bytes_after = Vec::new();
        model::save_checkpoint(&params, &spec, &mut bytes_after).unwrap();
        assert_eq!(bytes_before, bytes_after);
    }

    #[test]
    fn adam_first_step_magnitude_is_about_lr() {
        // Single scalar parameter with constant gradient: first update is
        // lr * g / (|g| + eps) ~= lr, and the second matches too.
        let cfg = OptimizerConfig {
            steps: 2,
            batch_size: 1,
            ..tiny_optimizer(2, 0)
        };
        let mut m = 0.0;
        let mut v = 0.0;
        let g: f64 = 3.0;
        let mut theta = 1.0;
        for t in 1..=2u32 {
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
            let update = cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            assert!(
                (update.abs() - cfg.lr).abs() < 1e-6,
                "step {t}: {update} vs lr {}",
                cfg.lr
            );
            theta -= update;
        }
        assert!(theta < 1.0);
    }

    #[test]
    fn adam_on_model_params_matches_scalar_recurrence() {
        let spec = synthetic_model_spec((32, 32), 0.25);
        let mut params = build::<f64>(&spec, 3).unwrap();
        let name = "stem.conv.weight";
        let before = params.get(name).unwrap().data().to_vec();
        // seed a constant gradient on one tensor
        let numel = before.len();
        params.get(name).unwrap().accumulate_grad(&vec![0.5; numel]);
        let cfg = tiny_optimizer(1, 0);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, &cfg).unwrap();
        let after = params.get(name).unwrap().data();
        let g: f64 = 0.5;
        let m = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
        let v = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
        let expect = cfg.lr * m / (v.sqrt() + cfg.eps);
        for i in 0..numel {
            assert!((before[i] - after[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_indices_cover_epochs_deterministically() {
        let a = batch_indices(10, 4, 7, 0);
        let b = batch_indices(10, 4, 7, 0);
        assert_eq!(a, b);
        // one epoch = 10 samples; steps 0..4 visit 16 slots with each index
        // appearing at least once in the first 10
        let mut seen = vec![false; 10];
        for step in 0..3 {
            for i in batch_indices(10, 4, 7, step) {
                seen[i] = true;
            }
        }
        assert!(seen.iter().filter(|&&s| s).count() >= 10 - 2);
        // wrapping into the next epoch re-shuffles
        let later = batch_indices(10, 4, 7, 5);
        assert_eq!(later.len(), 4);
    }

    #[test]
    fn experiment_kind_protocols_are_enforced() {
        let base = synthetic_model_spec((32, 32), 0.25);
        let exp = experiment_for_kind(
            ExperimentKind::StlSeg,
            &base,
            tiny_optimizer(1, 0),
            PathBuf::from("unused"),
            None,
        )
        .unwrap();
        assert_eq!(exp.weights, LossWeights { w_seg: 1.0, w_det: 0.0 });
        assert!(exp.model.heads.contains(&Head::Seg));
        assert!(!exp.model.heads.contains(&Head::Det));

        // hand-built config violating the protocol fails validation
        let mut bad = exp.clone();
        bad.weights = LossWeights { w_seg: 2.0, w_det: 0.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_step_training_returns_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneConfig {
            seed: 5,
            size: (32, 64),
            ..SceneConfig::default()
        };
        data::write_dataset(&scene, 4, dir.path()).unwrap();
        let exp = experiment_for_kind(
            ExperimentKind::Mtl,
            &synthetic_model_spec((32, 64), 0.25),
            tiny_optimizer(0, 9),
            dir.path().to_path_buf(),
            None,
        )
        .unwrap();
        let outcome = train::<f32>(&exp, None).unwrap();
        let fresh = build::<f32>(&exp.model, 9).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        model::save_checkpoint(&outcome.params, &exp.model, &mut a).unwrap();
        model::save_checkpoint(&fresh, &exp.model, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneConfig {
            seed: 6,
            size: (32, 64),
            ..SceneConfig::default()
        };
        data::write_dataset(&scene, 6, dir.path()).unwrap();
        let exp = experiment_for_kind(
            ExperimentKind::Mtl,
            &synthetic_model_spec((32, 64), 0.25),
            tiny_optimizer(3, 4),
            dir.path().to_path_buf(),
            None,
        )
        .unwrap();
        let a = train::<f32>(&exp, None).unwrap();
        let b = train::<f32>(&exp, None).unwrap();
        assert_eq!(loss_csv(&a.loss_log), loss_csv(&b.loss_log));
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        model::save_checkpoint(&a.params, &exp.model, &mut ca).unwrap();
        model::save_checkpoint(&b.params, &exp.model, &mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn median_helpers() {
        assert_eq!(median(&mut vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut vec![4.0, 1.0]), Some(2.5));
        assert_eq!(median(&mut vec![]), None);
        assert_eq!(
            median_of_options(vec![Some(1.0), None, Some(3.0)]),
            Some(2.0)
        );
        assert_eq!(median_of_options(vec![None, None]), None);
    }
}
