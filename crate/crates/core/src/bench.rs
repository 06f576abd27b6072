//! Analytic cost model and wall-clock throughput measurement.
//!
//! MAC counts come straight from the model's layer table (conv:
//! `O*H'*W'*C*kh*kw`, deconv: `H*W*C*O*k*k`, batch-norm one MAC per
//! element). Timing reports the median over a warmup + N-run protocol;
//! medians rather than means keep scheduler noise out of the ordering
//! assertions.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{self, layer_table, ModelSpec};
use crate::postproc;
use crate::rng::Rng;
use crate::tensor::ops::Mode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub params: u64,
    pub activation_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measured {
    pub runs: usize,
    pub warmup: usize,
    pub threads: usize,
    pub forward_median_ms: f64,
    pub postproc_median_ms: f64,
    /// Median of per-run (forward + postproc) totals.
    pub total_median_ms: f64,
    pub fps: f64,
    /// Single-run measurements carry no variance information.
    pub variance_warning: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub input_size: (usize, usize),
    pub width_mult: f64,
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_params: u64,
    pub total_activation_bytes: u64,
    pub measured: Option<Measured>,
}

/// Per-layer analytic MACs/params/activations for one image at the spec's
/// input size (f32 activations).
pub fn count_macs(spec: &ModelSpec) -> Result<CostReport> {
    spec.validate()?;
    let layers: Vec<LayerCost> = layer_table(spec)
        .iter()
        .map(|l| LayerCost {
            name: l.name.clone(),
            macs: l.macs(),
            params: l.param_count(),
            activation_bytes: l.activation_elems() * 4,
        })
        .collect();
    Ok(CostReport {
        input_size: spec.input_size,
        width_mult: spec.width_mult,
        total_macs: layers.iter().map(|l| l.macs).sum(),
        total_params: layers.iter().map(|l| l.params).sum(),
        total_activation_bytes: layers.iter().map(|l| l.activation_bytes).sum(),
        layers,
        measured: None,
    })
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = samples.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Measures single-image eval-mode throughput: forward pass and
/// post-processing timed separately over `runs` runs after `warmup`
/// discarded runs. `fps = 1000 / median total ms`.
pub fn measure_fps(spec: &ModelSpec, runs: usize, warmup: usize, seed: u64) -> Result<CostReport> {
    let mut report = count_macs(spec)?;
    let params = model::build::<f32>(spec, seed)?;
    let (h, w) = spec.input_size;
    let mut rng = Rng::new(seed ^ 0xBEEF_C0DE);
    let data: Vec<f32> = (0..3 * h * w).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    let image = Tensor::from_vec(data, &[1, 3, h, w])?;

    let mut forward_ms = Vec::with_capacity(runs);
    let mut post_ms = Vec::with_capacity(runs);
    let mut totals = Vec::with_capacity(runs);
    for i in 0..warmup + runs {
        let t0 = Instant::now();
        let feats = model::forward_encoder(&params, spec, &image, Mode::Eval)?;
        let seg = if spec.heads.contains(&model::Head::Seg) {
            Some(model::forward_seg(&params, spec, &feats)?)
        } else {
            None
        };
        let det = if spec.heads.contains(&model::Head::Det) {
            Some(model::forward_det(&params, spec, &feats, Mode::Eval)?)
        } else {
            None
        };
        let t1 = Instant::now();
        if let Some(seg) = &seg {
            let _ = postproc::seg_argmax(seg, None)?;
        }
        if let Some(det) = &det {
            let decoded =
                postproc::decode_boxes(det, &spec.anchors, spec.det_classes.len(), (w, h))?;
            for image_dets in &decoded {
                let _ = postproc::nms(image_dets, 0.45, 0.25);
            }
        }
        let t2 = Instant::now();
        if i >= warmup {
            let f = t1.duration_since(t0).as_secs_f64() * 1000.0;
            let p = t2.duration_since(t1).as_secs_f64() * 1000.0;
            forward_ms.push(f);
            post_ms.push(p);
            totals.push(f + p);
        }
    }

    let total_median = median_ms(totals);
    report.measured = Some(Measured {
        runs,
        warmup,
        threads: rayon::current_num_threads(),
        forward_median_ms: median_ms(forward_ms),
        postproc_median_ms: median_ms(post_ms),
        total_median_ms: total_median,
        fps: 1000.0 / total_median,
        variance_warning: runs <= 1,
    });
    Ok(report)
}

impl CostReport {
    /// Human-readable per-layer table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "model {}x{} width_mult {}\n",
            self.input_size.0, self.input_size.1, self.width_mult
        ));
        out.push_str(&format!(
            "{:<16} {:>14} {:>12} {:>14}\n",
            "layer", "MACs", "params", "act bytes"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<16} {:>14} {:>12} {:>14}\n",
                l.name, l.macs, l.params, l.activation_bytes
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>14} {:>12} {:>14}\n",
            "TOTAL", self.total_macs, self.total_params, self.total_activation_bytes
        ));
        if let Some(m) = &self.measured {
            out.push_str(&format!(
                "forward {:.3} ms | postproc {:.3} ms | total {:.3} ms | {:.2} fps ({} runs, {} warmup, {} threads)\n",
                m.forward_median_ms, m.postproc_median_ms, m.total_median_ms, m.fps, m.runs, m.warmup, m.threads
            ));
            if m.variance_warning {
                out.push_str("warning: single measurement, variance unknown\n");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, LayerKind};
    use crate::train::synthetic_model_spec;

    #[test]
    fn single_conv_mac_closed_form() {
        // 1x1 conv over an 8-channel 4x4 input: 8 * Cout * 16 MACs.
        let layer = Layer {
            name: "probe".into(),
            kind: LayerKind::Conv {
                in_ch: 8,
                out_ch: 5,
                kernel: (1, 1),
                stride: (1, 1),
                padding: (0, 0),
                bias: false,
            },
            in_size: (4, 4),
            out_size: (4, 4),
        };
        assert_eq!(layer.macs(), 8 * 5 * 16);
    }

    #[test]
    fn totals_equal_sum_of_rows_and_match_shape_recount() {
        let spec = synthetic_model_spec((96, 128), 0.5);
        let report = count_macs(&spec).unwrap();
        assert_eq!(
            report.total_macs,
            report.layers.iter().map(|l| l.macs).sum::<u64>()
        );
        // independent recount from each layer's declared geometry
        for (row, layer) in report.layers.iter().zip(layer_table(&spec)) {
            let macs = match layer.kind {
                LayerKind::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    let mut acc = 0u64;
                    for _ in 0..layer.out_size.0 * layer.out_size.1 {
                        acc += (in_ch * out_ch * kernel.0 * kernel.1) as u64;
                    }
                    acc
                }
                LayerKind::Deconv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => (layer.in_size.0 * layer.in_size.1 * in_ch * out_ch * kernel * kernel) as u64,
                LayerKind::BatchNorm { ch } => (ch * layer.out_size.0 * layer.out_size.1) as u64,
            };
            assert_eq!(row.macs, macs, "{}", row.name);
        }
    }

    #[test]
    fn width_mult_half_is_at_most_35_percent() {
        let full = count_macs(&synthetic_model_spec((384, 1280), 1.0)).unwrap();
        let half = count_macs(&synthetic_model_spec((384, 1280), 0.5)).unwrap();
        let ratio = half.total_macs as f64 / full.total_macs as f64;
        assert!(ratio <= 0.35, "ratio {ratio}");
    }

    #[test]
    fn removing_a_skip_strictly_reduces_macs_by_its_score_conv() {
        let with = synthetic_model_spec((96, 128), 0.5);
        let without = ModelSpec {
            skip_strides: vec![8],
            ..with.clone()
        };
        let a = count_macs(&with).unwrap();
        let b = count_macs(&without).unwrap();
        assert!(b.total_macs < a.total_macs);
        let removed: u64 = a
            .layers
            .iter()
            .filter(|l| l.name == "seg.score16")
            .map(|l| l.macs)
            .sum();
        assert_eq!(a.total_macs - b.total_macs, removed);
        // MAC count is strictly decreasing in |skip_strides|
        let none = ModelSpec {
            skip_strides: vec![],
            ..with
        };
        let c = count_macs(&none).unwrap();
        assert!(c.total_macs < b.total_macs);
    }

    #[test]
    fn fps_measurement_smoke() {
        let spec = synthetic_model_spec((32, 32), 0.25);
        let report = measure_fps(&spec, 2, 1, 3).unwrap();
        let m = report.measured.unwrap();
        assert!(m.fps > 0.0);
        assert!((m.fps - 1000.0 / m.total_median_ms).abs() < 1e-9);
        assert!(!m.variance_warning);
        let single = measure_fps(&spec, 1, 0, 3).unwrap();
        assert!(single.measured.unwrap().variance_warning);
    }
}
