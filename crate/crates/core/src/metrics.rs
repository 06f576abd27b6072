//! Evaluation measures: per-class / mean IoU for segmentation and
//! per-class AP / mAP for detection, plus the five-column comparison table
//! the study harness emits.
//!
//! AP uses all-points interpolation (area under the precision envelope);
//! greedy matching assigns each detection, in score order, to the
//! highest-IoU unmatched ground truth of its class with IoU >= threshold.
//! Classes absent from the ground truth are reported as undefined and
//! excluded from means rather than silently counted as zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::{box_iou, BoxPx, Detection, SegMask, UNEVALUATED};

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Pixel confusion counts; rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: usize, pred: usize) -> Result<()> {
        if gt >= self.classes || pred >= self.classes {
            return Err(Error::InvalidArg(format!(
                "confusion: class ({gt}, {pred}) out of range (C={})",
                self.classes
            )));
        }
        self.counts[gt * self.classes + pred] += 1;
        Ok(())
    }

    /// Merge for parallel per-image accumulation; equals serial accumulation.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Adds one predicted mask against its label map. Ignore-label pixels
/// (gt = 255) and unevaluated prediction pixels are skipped.
pub fn accumulate_confusion(pred: &SegMask, gt: &[u8], cm: &mut ConfusionMatrix) -> Result<()> {
    if gt.len() != pred.classes.len() {
        return Err(Error::shape("accumulate_confusion", "mask/label size mismatch"));
    }
    for (p, (&pv, &gv)) in pred.classes.iter().zip(gt).enumerate() {
        if gv == 255 || pv == UNEVALUATED {
            continue;
        }
        cm.add(gv as usize, pv as usize).map_err(|e| {
            Error::InvalidArg(format!("pixel {p}: {e}"))
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegIouReport {
    /// IoU per class; `None` when the class is absent from both ground
    /// truth and prediction (undefined, excluded from the mean).
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Per-class IoU `diag / (row + col - diag)` and the mean over defined
/// classes.
pub fn seg_iou(cm: &ConfusionMatrix) -> SegIouReport {
    let c = cm.classes();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let diag = cm.count(k, k);
        let row: u64 = (0..c).map(|j| cm.count(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.count(i, k)).sum();
        let denom = row + col - diag;
        per_class.push(if denom == 0 {
            None
        } else {
            Some(diag as f64 / denom as f64)
        });
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    SegIouReport { per_class, mean }
}

// ---------------------------------------------------------------------------
// Detection
// ---------------------------------------------------------------------------

/// One ground-truth box for evaluation.
#[derive(Debug, Clone, Copy)]
pub struct GtDet {
    pub class_idx: usize,
    pub bbox: BoxPx,
}

/// Precision/recall trace of one class: detections sorted by score with
/// TP/FP flags and the cumulative curves.
#[derive(Debug, Clone)]
pub struct PRCurve {
    pub tp_flags: Vec<bool>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub num_gt: usize,
}

impl PRCurve {
    /// Area under the precision envelope over recall (all-points
    /// interpolation).
    pub fn average_precision(&self) -> f64 {
        if self.num_gt == 0 {
            return 0.0;
        }
        // envelope: running max of precision from the right
        let n = self.precision.len();
        let mut envelope = self.precision.clone();
        for i in (0..n.saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..n {
            let r = self.recall[i];
            if r > prev_recall {
                ap += (r - prev_recall) * envelope[i];
                prev_recall = r;
            }
        }
        ap
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetApReport {
    /// AP per class; `None` when the class has no ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Greedy-matched PR curve of one class across the whole evaluation set.
pub fn pr_curve(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<GtDet>],
    class_idx: usize,
    iou_thresh: f64,
) -> PRCurve {
    // (image, detection order within image) for deterministic tie-breaks
    let mut entries: Vec<(usize, usize, f64, BoxPx)> = Vec::new();
    for (img, dets) in dets_per_image.iter().enumerate() {
        for (di, d) in dets.iter().enumerate() {
            if d.class_idx == class_idx {
                entries.push((img, di, d.score, d.bbox));
            }
        }
    }
    entries.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let gt_indices: Vec<Vec<usize>> = gts_per_image
        .iter()
        .map(|gts| {
            gts.iter()
                .enumerate()
                .filter(|(_, g)| g.class_idx == class_idx)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let num_gt: usize = gt_indices.iter().map(|v| v.len()).sum();

    let mut matched: Vec<Vec<bool>> = gts_per_image.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(entries.len());
    for &(img, _, _, bbox) in &entries {
        // highest-IoU unmatched ground truth with IoU >= threshold
        let mut best: Option<(usize, f64)> = None;
        for &gi in &gt_indices[img] {
            if matched[img][gi] {
                continue;
            }
            let iou = box_iou(&bbox, &gts_per_image[img][gi].bbox);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[img][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &flag) in tp_flags.iter().enumerate() {
        if flag {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(if num_gt == 0 {
            0.0
        } else {
            tp as f64 / num_gt as f64
        });
    }

    PRCurve {
        tp_flags,
        precision,
        recall,
        num_gt,
    }
}

/// Per-class AP at the given IoU threshold plus the mean over classes with
/// at least one ground truth.
pub fn det_ap(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<GtDet>],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<DetApReport> {
    if dets_per_image.len() != gts_per_image.len() {
        return Err(Error::shape("det_ap", "detection/ground-truth image counts differ"));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let curve = pr_curve(dets_per_image, gts_per_image, c, iou_thresh);
        per_class.push(if curve.num_gt == 0 {
            None
        } else {
            Some(curve.average_precision())
        });
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(DetApReport { per_class, mean })
}

// ---------------------------------------------------------------------------
// Comparison table
// ---------------------------------------------------------------------------

pub const STUDY_COLUMNS: [&str; 5] = ["STL Seg", "STL Det", "MTL", "MTL_10", "MTL_100"];

/// Metric results of one study column; `None` per task when that task was
/// not trained (rendered blank, not zero).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ColumnResults {
    pub seg: Option<SegIouReport>,
    pub det: Option<DetApReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub metric: String,
    pub values: Vec<Option<f64>>,
}

/// The comparison-study table: per-class JI rows + mean IOU, per-class AP
/// rows + mean AP, one column per experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

pub fn report_table(
    columns: &[(String, ColumnResults)],
    seg_classes: &[String],
    det_classes: &[String],
) -> Result<ResultsTable> {
    for (name, col) in columns {
        if let Some(seg) = &col.seg {
            if seg.per_class.len() != seg_classes.len() {
                return Err(Error::shape("report_table", format!("{name}: seg class count")));
            }
        }
        if let Some(det) = &col.det {
            if det.per_class.len() != det_classes.len() {
                return Err(Error::shape("report_table", format!("{name}: det class count")));
            }
        }
    }
    let mut rows = Vec::new();
    for (ci, class) in seg_classes.iter().enumerate() {
        rows.push(TableRow {
            metric: format!("JI {class}"),
            values: columns
                .iter()
                .map(|(_, c)| c.seg.as_ref().and_then(|s| s.per_class[ci]))
                .collect(),
        });
    }
    rows.push(TableRow {
        metric: "mean IOU".to_string(),
        values: columns
            .iter()
            .map(|(_, c)| c.seg.as_ref().and_then(|s| s.mean))
            .collect(),
    });
    for (ci, class) in det_classes.iter().enumerate() {
        rows.push(TableRow {
            metric: format!("AP {class}"),
            values: columns
                .iter()
                .map(|(_, c)| c.det.as_ref().and_then(|d| d.per_class[ci]))
                .collect(),
        });
    }
    rows.push(TableRow {
        metric: "mean AP".to_string(),
        values: columns
            .iter()
            .map(|(_, c)| c.det.as_ref().and_then(|d| d.mean))
            .collect(),
    });
    Ok(ResultsTable {
        columns: columns.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

impl ResultsTable {
    /// CSV with blank cells for untrained tasks, 4 decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Metric");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.metric);
            for v in &row.values {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v:.4}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
