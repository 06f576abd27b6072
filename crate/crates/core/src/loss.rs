//! Task losses and their weighted combination.
//!
//! Total training loss is `w_seg * L_seg + w_det * L_det`: cross entropy
//! over valid pixels for segmentation, YOLO-style sum-squared error for
//! detection. Both task losses are scalar graph nodes so the combination
//! distributes gradients linearly into the shared encoder.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, DetAssignment};
use crate::tensor::{Elem, Tensor};

/// Weights of the two task losses; at least one must be non-zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub w_seg: f64,
    pub w_det: f64,
}

impl LossWeights {
    pub fn new(w_seg: f64, w_det: f64) -> Result<Self> {
        let w = LossWeights { w_seg, w_det };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_seg < 0.0 || self.w_det < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.w_seg == 0.0 && self.w_det == 0.0 {
            return Err(Error::Config("loss weights must not both be zero".into()));
        }
        Ok(())
    }
}

/// Squared-error loss multipliers (YOLO lineage defaults).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetLambdas {
    pub coord: f64,
    pub noobj: f64,
}

impl Default for DetLambdas {
    fn default() -> Self {
        DetLambdas {
            coord: 5.0,
            noobj: 0.5,
        }
    }
}

/// One ground-truth box, center/size normalized to [0, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GtBox {
    pub class_idx: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GtBox {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(Error::InvalidArg(format!(
                "box center ({}, {}) outside [0,1]",
                self.cx, self.cy
            )));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidArg("box dims must be positive".into()));
        }
        if self.class_idx >= classes {
            return Err(Error::InvalidArg(format!(
                "class {} out of range (C={classes})",
                self.class_idx
            )));
        }
        Ok(())
    }
}

/// Shape IoU of two origin-centered boxes.
pub fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    let union = w1 * h1 + w2 * h2 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Best anchor for a box of (w, h) grid units: maximum shape IoU, ties to
/// the lowest index.
pub fn best_anchor(w_grid: f64, h_grid: f64, anchors: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (i, &(pw, ph)) in anchors.iter().enumerate() {
        let iou = shape_iou(w_grid, h_grid, pw, ph);
        if iou > best_iou {
            best_iou = iou;
            best = i;
        }
    }
    best
}

/// Responsible cell of a normalized center: `floor(c * G)`, clamped so an
/// exactly-1.0 coordinate falls in the last cell.
pub fn responsible_cell(cx: f64, cy: f64, grid: (usize, usize)) -> (usize, usize) {
    let (hg, wg) = grid;
    let gx = ((cx * wg as f64).floor() as usize).min(wg - 1);
    let gy = ((cy * hg as f64).floor() as usize).min(hg - 1);
    (gx, gy)
}

/// Builds per-(cell, anchor) regression targets for a batch of ground-truth
/// boxes. Exactly one (cell, anchor) is responsible per box; when two boxes
/// claim the same slot the later one wins and the collision is counted.
pub fn assign_targets(
    gt: &[Vec<GtBox>],
    grid: (usize, usize),
    anchors: &[(f64, f64)],
    classes: usize,
) -> Result<Arc<DetAssignment>> {
    let (hg, wg) = grid;
    if hg == 0 || wg == 0 || anchors.is_empty() || classes == 0 {
        return Err(Error::InvalidArg("assign_targets: empty grid/anchors/classes".into()));
    }
    let batch = gt.len();
    let a = anchors.len();
    let cells = batch * a * hg * wg;
    let mut assign = DetAssignment {
        batch,
        anchors: a,
        classes,
        grid_h: hg,
        grid_w: wg,
        responsible: vec![false; cells],
        tx: vec![0.0; cells],
        ty: vec![0.0; cells],
        tw: vec![0.0; cells],
        th: vec![0.0; cells],
        class_idx: vec![0; cells],
        collisions: 0,
    };

    for (n, boxes) in gt.iter().enumerate() {
        for gtb in boxes {
            gtb.validate(classes)?;
            let (gx, gy) = responsible_cell(gtb.cx, gtb.cy, grid);
            let w_grid = gtb.w * wg as f64;
            let h_grid = gtb.h * hg as f64;
            let ai = best_anchor(w_grid, h_grid, anchors);
            let idx = ((n * a + ai) * hg + gy) * wg + gx;
            if assign.responsible[idx] {
                assign.collisions += 1;
            }
            assign.responsible[idx] = true;
            assign.tx[idx] = gtb.cx * wg as f64 - gx as f64;
            assign.ty[idx] = gtb.cy * hg as f64 - gy as f64;
            assign.tw[idx] = (w_grid / anchors[ai].0).ln();
            assign.th[idx] = (h_grid / anchors[ai].1).ln();
            assign.class_idx[idx] = gtb.class_idx as u32;
        }
    }
    Ok(Arc::new(assign))
}

/// Mean cross entropy of `logits: [N,C,H,W]` against a class-index map
/// (255 = ignore), restricted by the optional validity mask.
pub fn seg_loss<T: Elem>(
    logits: &Tensor<T>,
    labels: &[u8],
    valid_mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    ops::seg_cross_entropy(logits, labels, valid_mask)
}

/// YOLO-style sum-squared-error detection loss (normalized by batch size).
pub fn det_loss<T: Elem>(
    raw: &Tensor<T>,
    targets: &Arc<DetAssignment>,
    lambdas: DetLambdas,
) -> Result<Tensor<T>> {
    ops::det_sse(raw, targets, lambdas.coord, lambdas.noobj)
}

/// `w_seg * L_seg + w_det * L_det` as a graph node.
pub fn mtl_loss<T: Elem>(
    l_seg: &Tensor<T>,
    l_det: &Tensor<T>,
    weights: LossWeights,
) -> Result<Tensor<T>> {
    weights.validate()?;
    let ws = ops::scale(l_seg, weights.w_seg)?;
    let wd = ops::scale(l_det, weights.w_det)?;
    ops::add(&ws, &wd)
}
