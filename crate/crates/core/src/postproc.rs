//! From raw network outputs to detections and label maps.
//!
//! Box decoding follows the YOLO-v2 convention: per cell and anchor,
//! `bx = (sigma(tx)+cx)/Wg`, `by = (sigma(ty)+cy)/Hg`, `bw = pw*e^tw/Wg`,
//! `bh = ph*e^th/Hg`, score `sigma(to) * max_c softmax(class)_c`. Every
//! tie-break is deterministic and documented at the site.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{sigmoid_scalar, softmax_lane};
use crate::tensor::{Elem, Tensor};

/// Marker for pixels excluded by the horizon restriction.
pub const UNEVALUATED: u8 = 255;

/// Corner box in pixels, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPx {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxPx {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn clip(&self, w: f64, h: f64) -> BoxPx {
        BoxPx {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

/// Intersection over union; degenerate (zero-area) boxes give 0.
pub fn box_iou(a: &BoxPx, b: &BoxPx) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One scored, classed, clipped detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_idx: usize,
    /// `sigma(objectness) * max class probability`, in [0, 1].
    pub score: f64,
    pub bbox: BoxPx,
}

/// Decodes the raw detection head output `[N, A*(5+C), Hg, Wg]` into
/// per-image pre-NMS detections, clipped to `img_size = (W, H)` pixels.
pub fn decode_boxes<T: Elem>(
    raw: &Tensor<T>,
    anchors: &[(f64, f64)],
    num_classes: usize,
    img_size: (usize, usize),
) -> Result<Vec<Vec<Detection>>> {
    let shape = raw.shape();
    if shape.len() != 4 {
        return Err(Error::shape("decode_boxes", format!("want 4-D raw, got {shape:?}")));
    }
    let (n, ch, hg, wg) = (shape[0], shape[1], shape[2], shape[3]);
    let a = anchors.len();
    if ch != a * (5 + num_classes) {
        return Err(Error::shape(
            "decode_boxes",
            format!("{ch} channels, want {a} anchors * (5 + {num_classes})"),
        ));
    }
    let (img_w, img_h) = (img_size.0 as f64, img_size.1 as f64);
    let cells = hg * wg;
    let data = raw.data();

    let mut result = Vec::with_capacity(n);
    for img in 0..n {
        let mut dets = Vec::new();
        let mut probs = vec![T::zero(); num_classes];
        for (ai, &(pw, ph)) in anchors.iter().enumerate() {
            let ch0 = ai * (5 + num_classes);
            for gy in 0..hg {
                for gx in 0..wg {
                    let cell = gy * wg + gx;
                    let at = |f: usize| data[(img * ch + ch0 + f) * cells + cell].as_f64();
                    let bx = (sigmoid_scalar(at(0)) + gx as f64) / wg as f64;
                    let by = (sigmoid_scalar(at(1)) + gy as f64) / hg as f64;
                    let bw = pw * at(2).exp() / wg as f64;
                    let bh = ph * at(3).exp() / hg as f64;
                    let objectness = sigmoid_scalar(at(4));
                    softmax_lane(data, img * ch + ch0 + 5, cells, cell, num_classes, &mut probs);
                    // argmax, ties to the lowest class index
                    let mut class_idx = 0;
                    let mut best = probs[0];
                    for (k, &p) in probs.iter().enumerate().skip(1) {
                        if p > best {
                            best = p;
                            class_idx = k;
                        }
                    }
                    let (cx_px, cy_px) = (bx * img_w, by * img_h);
                    let (w_px, h_px) = (bw * img_w, bh * img_h);
                    let bbox = BoxPx {
                        x1: cx_px - w_px / 2.0,
                        y1: cy_px - h_px / 2.0,
                        x2: cx_px + w_px / 2.0,
                        y2: cy_px + h_px / 2.0,
                    }
                    .clip(img_w, img_h);
                    dets.push(Detection {
                        class_idx,
                        score: objectness * best.as_f64(),
                        bbox,
                    });
                }
            }
        }
        result.push(dets);
    }
    Ok(result)
}

fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    // score desc, then x1 asc, then y1 asc
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(
            a.bbox
                .x1
                .partial_cmp(&b.bbox.x1)
                .unwrap_or(std::cmp::Ordering::Equal),
        )
        .then(
            a.bbox
                .y1
                .partial_cmp(&b.bbox.y1)
                .unwrap_or(std::cmp::Ordering::Equal),
        )
}

/// Per-class greedy non-maximum suppression. Detections below
/// `score_thresh` are dropped; a survivor suppresses same-class detections
/// with IoU strictly greater than `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64, score_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    let mut candidates: Vec<Detection> = dets
        .iter()
        .filter(|d| d.score >= score_thresh)
        .copied()
        .collect();
    candidates.sort_by(det_order);
    'outer: for cand in candidates {
        for k in &kept {
            if k.class_idx == cand.class_idx && box_iou(&k.bbox, &cand.bbox) > iou_thresh {
                continue 'outer;
            }
        }
        kept.push(cand);
    }
    kept
}

/// Per-pixel class map; `horizon_row` marks rows `0..horizon_row` as
/// unevaluated (the roadway-only segmentation optimization).
#[derive(Debug, Clone)]
pub struct SegMask {
    pub h: usize,
    pub w: usize,
    /// Class index per pixel, row-major; [`UNEVALUATED`] above the horizon.
    pub classes: Vec<u8>,
    pub horizon_row: Option<usize>,
}

/// Argmax over segmentation logits `[N,C,H,W]` (ties to the lowest class
/// index). When `horizon_row` is set, rows above it are not evaluated.
pub fn seg_argmax<T: Elem>(logits: &Tensor<T>, horizon_row: Option<usize>) -> Result<Vec<SegMask>> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return Err(Error::shape("seg_argmax", format!("want 4-D logits, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c > 254 {
        return Err(Error::InvalidArg("seg_argmax: more than 254 classes".into()));
    }
    if let Some(row) = horizon_row {
        if row > h {
            return Err(Error::InvalidArg(format!(
                "horizon row {row} outside [0, {h}]"
            )));
        }
    }
    let plane = h * w;
    let data = logits.data();
    let start_row = horizon_row.unwrap_or(0);

    let mut masks = Vec::with_capacity(n);
    for img in 0..n {
        let mut classes = vec![UNEVALUATED; plane];
        for y in start_row..h {
            for x in 0..w {
                let p = y * w + x;
                let mut best_c = 0u8;
                let mut best = data[(img * c) * plane + p];
                for ch in 1..c {
                    let v = data[(img * c + ch) * plane + p];
                    if v > best {
                        best = v;
                        best_c = ch as u8;
                    }
                }
                classes[p] = best_c;
            }
        }
        masks.push(SegMask {
            h,
            w,
            classes,
            horizon_row,
        });
    }
    Ok(masks)
}

/// JSON-lines serialization of detections:
/// `{"image_id":..., "class":..., "score":..., "box":[x1,y1,x2,y2]}`.
pub fn detections_to_jsonl(
    image_id: &str,
    dets: &[Detection],
    class_names: &[String],
) -> Result<String> {
    let mut out = String::new();
    for d in dets {
        let name = class_names
            .get(d.class_idx)
            .map(|s| s.as_str())
            .unwrap_or("unknown");
        let line = serde_json::json!({
            "image_id": image_id,
            "class": name,
            "score": d.score,
            "box": [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// Segmentation tint colors: road green, sidewalk pink; further classes
/// cycle a fixed palette.
pub fn seg_class_color(class_idx: u8) -> [u8; 3] {
    match class_idx {
        0 => [0, 0, 0], // background untinted
        1 => [0, 200, 0],
        2 => [255, 105, 180],
        other => {
            let palette = [
                [255, 165, 0],
                [0, 180, 255],
                [200, 0, 255],
                [255, 255, 0],
            ];
            palette[(other as usize - 3) % palette.len()]
        }
    }
}

pub fn det_class_color(class_idx: usize) -> [u8; 3] {
    let palette = [
        [255, 0, 0],
        [0, 90, 255],
        [255, 220, 0],
        [0, 255, 160],
        [255, 0, 220],
    ];
    palette[class_idx % palette.len()]
}

/// Renders an RGB overlay: segmentation tint blended onto the image plus
/// class-colored box outlines. `rgb` is HxW 8-bit interleaved.
pub fn render_overlay(
    rgb: &[u8],
    w: usize,
    h: usize,
    mask: Option<&SegMask>,
    dets: &[Detection],
) -> Result<Vec<u8>> {
    if rgb.len() != 3 * w * h {
        return Err(Error::shape("render_overlay", "rgb buffer size mismatch"));
    }
    let mut out = rgb.to_vec();
    if let Some(mask) = mask {
        if mask.w != w || mask.h != h {
            return Err(Error::shape("render_overlay", "mask size mismatch"));
        }
        for p in 0..w * h {
            let class = mask.classes[p];
            if class == UNEVALUATED || class == 0 {
                continue;
            }
            let tint = seg_class_color(class);
            for ch in 0..3 {
                let v = out[p * 3 + ch] as u16;
                out[p * 3 + ch] = ((v + 2 * tint[ch] as u16) / 3) as u8;
            }
        }
    }
    for det in dets {
        let color = det_class_color(det.class_idx);
        let x1 = det.bbox.x1.round().max(0.0) as usize;
        let y1 = det.bbox.y1.round().max(0.0) as usize;
        let x2 = (det.bbox.x2.round() as usize).min(w.saturating_sub(1));
        let y2 = (det.bbox.y2.round() as usize).min(h.saturating_sub(1));
        if x1 > x2 || y1 > y2 {
            continue;
        }
        let mut put = |x: usize, y: usize| {
            let p = (y * w + x) * 3;
            out[p] = color[0];
            out[p + 1] = color[1];
            out[p + 2] = color[2];
        };
        for x in x1..=x2 {
            put(x, y1);
            put(x, y2);
        }
        for y in y1..=y2 {
            put(x1, y);
            put(x2, y);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn iou_identical_disjoint_and_partial() {
        let a = BoxPx {
            x1: 0.0,
            y1: 0.0,
            x2: 2.0,
            y2: 2.0,
        };
        assert_eq!(box_iou(&a, &a), 1.0);
        let b = BoxPx {
            x1: 5.0,
            y1: 5.0,
            x2: 6.0,
            y2: 6.0,
        };
        assert_eq!(box_iou(&a, &b), 0.0);
        let c = BoxPx {
            x1: 1.0,
            y1: 1.0,
            x2: 3.0,
            y2: 3.0,
        };
        assert!((box_iou(&a, &c) - 1.0 / 7.0).abs() < 1e-12);
        // degenerate box
        let d = BoxPx {
            x1: 1.0,
            y1: 1.0,
            x2: 1.0,
            y2: 4.0,
        };
        assert_eq!(box_iou(&a, &d), 0.0);
    }

    fn raw_with(
        anchors: usize,
        classes: usize,
        hg: usize,
        wg: usize,
        set: &[(usize, usize, usize, f64)],
    ) -> Tensor<f64> {
        // set entries: (anchor, field, cell, value)
        let ch = anchors * (5 + classes);
        let mut data = vec![0.0; ch * hg * wg];
        for &(a, f, cell, v) in set {
            data[(a * (5 + classes) + f) * hg * wg + cell] = v;
        }
        Tensor::from_f64_slice(&data, &[1, ch, hg, wg]).unwrap()
    }

    #[test]
    fn decode_center_offsets_at_zero_logits() {
        // tx=ty=0 at cell (0,0) of a 4x4 grid: center (0.125, 0.125).
        let raw = raw_with(1, 1, 4, 4, &[]);
        let dets = decode_boxes(&raw, &[(1.0, 1.0)], 1, (64, 64)).unwrap();
        let d = &dets[0][0];
        let cx = (d.bbox.x1 + d.bbox.x2) / 2.0 / 64.0;
        let cy = (d.bbox.y1 + d.bbox.y2) / 2.0 / 64.0;
        assert!((cx - 0.125).abs() < 1e-9);
        assert!((cy - 0.125).abs() < 1e-9);
    }

    #[test]
    fn decode_anchor_size_at_zero_logits() {
        // tw=th=0 with anchor (2,2) on a 4x4 grid: size 0.5 normalized.
        let raw = raw_with(1, 1, 4, 4, &[]);
        let dets = decode_boxes(&raw, &[(2.0, 2.0)], 1, (64, 64)).unwrap();
        let d = &dets[0][5]; // cell (1,1) to stay clear of clipping
        let w = (d.bbox.x2 - d.bbox.x1) / 64.0;
        let h = (d.bbox.y2 - d.bbox.y1) / 64.0;
        assert!((w - 0.5).abs() < 1e-9);
        assert!((h - 0.5).abs() < 1e-9);
    }

    #[test]
    fn decode_full_chain_hand_example() {
        // cell (1,1), anchor (1,1), grid 4x4, image 64x64 -> (16,16,32,32).
        let raw = raw_with(1, 1, 4, 4, &[]);
        let dets = decode_boxes(&raw, &[(1.0, 1.0)], 1, (64, 64)).unwrap();
        let d = &dets[0][5];
        assert!((d.bbox.x1 - 16.0).abs() < 1e-9);
        assert!((d.bbox.y1 - 16.0).abs() < 1e-9);
        assert!((d.bbox.x2 - 32.0).abs() < 1e-9);
        assert!((d.bbox.y2 - 32.0).abs() < 1e-9);
    }

    #[test]
    fn decode_score_is_monotone_in_objectness() {
        let low = raw_with(1, 2, 2, 2, &[(0, 4, 0, 0.2)]);
        let high = raw_with(1, 2, 2, 2, &[(0, 4, 0, 1.5)]);
        let d_low = decode_boxes(&low, &[(1.0, 1.0)], 2, (64, 64)).unwrap()[0][0];
        let d_high = decode_boxes(&high, &[(1.0, 1.0)], 2, (64, 64)).unwrap()[0][0];
        assert!(d_high.score > d_low.score);
    }

    #[test]
    fn decoded_boxes_lie_inside_the_image() {
        let mut rng = Rng::new(12);
        let ch = 2 * (5 + 3);
        let vals: Vec<f64> = (0..ch * 9).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let raw = Tensor::<f64>::from_f64_slice(&vals, &[1, ch, 3, 3]).unwrap();
        let dets = decode_boxes(&raw, &[(1.0, 1.0), (3.0, 2.0)], 3, (96, 64)).unwrap();
        for d in &dets[0] {
            assert!(d.bbox.x1 >= 0.0 && d.bbox.x2 <= 96.0);
            assert!(d.bbox.y1 >= 0.0 && d.bbox.y2 <= 64.0);
            assert!(d.score >= 0.0 && d.score <= 1.0);
        }
    }

    fn det(class_idx: usize, score: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> Detection {
        Detection {
            class_idx,
            score,
            bbox: BoxPx { x1, y1, x2, y2 },
        }
    }

    #[test]
    fn nms_single_detection_passes_through() {
        let d = det(0, 0.8, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[d], 0.5, 0.3), vec![d]);
        assert!(nms(&[d], 0.5, 0.9).is_empty());
    }

    #[test]
    fn nms_suppresses_duplicate() {
        let a = det(0, 0.9, 0.0, 0.0, 10.0, 10.0);
        let b = det(0, 0.8, 0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[b, a], 0.5, 0.0);
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn nms_three_box_derived_case() {
        // A(.9) suppresses B(IoU .6 with A); C survives (IoU .2/.3).
        let a = det(0, 0.9, 0.0, 0.0, 10.0, 10.0);
        // IoU(A,B)=0.6: overlap 75 of union 125 -> use 10x10 boxes shifted.
        let b = det(0, 0.8, 0.0, 2.5, 10.0, 12.5);
        assert!((box_iou(&a.bbox, &b.bbox) - 0.6).abs() < 1e-9);
        let c = det(0, 0.7, 0.0, 6.7, 10.0, 16.7);
        assert!(box_iou(&a.bbox, &c.bbox) < 0.25);
        assert!(box_iou(&b.bbox, &c.bbox) < 0.45);
        let kept = nms(&[a, b, c], 0.5, 0.0);
        assert_eq!(kept, vec![a, c]);
    }

    #[test]
    fn nms_is_per_class() {
        let a = det(0, 0.9, 0.0, 0.0, 10.0, 10.0);
        let b = det(1, 0.8, 0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[a, b], 0.5, 0.0);
        assert_eq!(kept.len(), 2);
    }

    /// O(n^2) reference NMS with the same deterministic ordering.
    fn nms_reference(dets: &[Detection], iou_thresh: f64, score_thresh: f64) -> Vec<Detection> {
        let mut cands: Vec<Detection> = dets
            .iter()
            .filter(|d| d.score >= score_thresh)
            .copied()
            .collect();
        cands.sort_by(super::det_order);
        let mut suppressed = vec![false; cands.len()];
        let mut kept = Vec::new();
        for i in 0..cands.len() {
            if suppressed[i] {
                continue;
            }
            kept.push(cands[i]);
            for j in (i + 1)..cands.len() {
                if !suppressed[j]
                    && cands[i].class_idx == cands[j].class_idx
                    && box_iou(&cands[i].bbox, &cands[j].bbox) > iou_thresh
                {
                    suppressed[j] = true;
                }
            }
        }
        kept
    }

    #[test]
    fn nms_matches_quadratic_reference_on_random_inputs() {
        for seed in 0..100u64 {
            let mut rng = Rng::new(seed);
            let n = rng.uniform_usize(0, 200);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let x1 = rng.uniform(0.0, 80.0);
                    let y1 = rng.uniform(0.0, 80.0);
                    det(
                        rng.uniform_usize(0, 2),
                        // quantized scores force tie-break paths
                        (rng.uniform(0.0, 1.0) * 8.0).round() / 8.0,
                        x1,
                        y1,
                        x1 + rng.uniform(2.0, 30.0),
                        y1 + rng.uniform(2.0, 30.0),
                    )
                })
                .collect();
            let got = nms(&dets, 0.5, 0.25);
            let want = nms_reference(&dets, 0.5, 0.25);
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn argmax_examples_and_tie_rule() {
        let logits = Tensor::<f64>::from_f64_slice(&[0.1, 0.9, 0.2], &[1, 3, 1, 1]).unwrap();
        let masks = seg_argmax(&logits, None).unwrap();
        assert_eq!(masks[0].classes, vec![1]);

        let logits = Tensor::<f64>::zeros(&[1, 3, 1, 2]);
        let masks = seg_argmax(&logits, None).unwrap();
        assert_eq!(masks[0].classes, vec![0, 0]);
    }

    #[test]
    fn horizon_marks_exactly_the_top_rows() {
        let h = 8;
        let logits = Tensor::<f64>::zeros(&[1, 3, h, 4]);
        let masks = seg_argmax(&logits, Some(h / 2)).unwrap();
        let m = &masks[0];
        for y in 0..h {
            for x in 0..4 {
                let v = m.classes[y * 4 + x];
                if y < h / 2 {
                    assert_eq!(v, UNEVALUATED);
                } else {
                    assert_eq!(v, 0);
                }
            }
        }
        assert!(seg_argmax(&logits, Some(h + 1)).is_err());
    }

    #[test]
    fn jsonl_format_is_stable() {
        let d = det(1, 0.75, 1.0, 2.0, 3.0, 4.0);
        let names = vec!["car".to_string(), "person".to_string()];
        let line = detections_to_jsonl("img_000", &[d], &names).unwrap();
        assert_eq!(
            line,
            "{\"box\":[1.0,2.0,3.0,4.0],\"class\":\"person\",\"image_id\":\"img_000\",\"score\":0.75}\n"
        );
    }

    #[test]
    fn overlay_draws_box_outline_and_tint() {
        let rgb = vec![100u8; 3 * 8 * 8];
        let mask = SegMask {
            h: 8,
            w: 8,
            classes: vec![1; 64],
            horizon_row: None,
        };
        let d = det(0, 0.9, 1.0, 1.0, 6.0, 6.0);
        let out = render_overlay(&rgb, 8, 8, Some(&mask), &[d]).unwrap();
        // corner pixel of the box outline has the class color
        let p = (1 * 8 + 1) * 3;
        assert_eq!(&out[p..p + 3], &det_class_color(0));
        // an interior pixel is green-tinted
        let q = (4 * 8 + 4) * 3;
        assert!(out[q + 1] > out[q]);
    }
}
