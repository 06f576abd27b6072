//! Synthetic driving-scene generation and dataset ingestion.
//!
//! The generator draws a ground-plane road trapezoid below a horizon with
//! flanking sidewalks and textured background, then places per-class shapes
//! (rectangle = car, thin ellipse = person, two-circle glyph = cyclist)
//! whose bounding boxes come from the rasterized extents, so they are tight
//! by construction. Segmentation labels cover only background/road/sidewalk;
//! objects stay background in the label map, mirroring the disjoint task
//! class split. All randomness is keyed by `(seed, index)`, so dataset
//! content is independent of generation order and thread count.
//!
//! On disk a dataset is `images/{id}.ppm`, `seg/{id}.pgm`,
//! `boxes/{id}.jsonl` and a `meta.json` carrying the config echo and
//! per-file SHA-256 checksums.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::GtBox;
use crate::rng::Rng;
use crate::tensor::{Elem, Tensor};

pub const SEG_IGNORE: u8 = 255;

/// Synthetic detection classes, in class-index order.
pub const DET_CLASS_NAMES: [&str; 3] = ["car", "person", "cyclist"];
/// Synthetic segmentation classes (3-class schema).
pub const SEG_CLASS_NAMES: [&str; 3] = ["background", "road", "sidewalk"];
/// Roadway-only 4-class schema variant.
pub const SEG_CLASS_NAMES_ROADWAY4: [&str; 4] = ["background", "road", "lane", "curb"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// (H, W), both divisible by 32.
    #[serde(default = "default_size")]
    pub size: (usize, usize),
    /// Object count range per class, inclusive.
    #[serde(default = "default_cars")]
    pub cars: (usize, usize),
    #[serde(default = "default_persons")]
    pub persons: (usize, usize),
    #[serde(default = "default_cyclists")]
    pub cyclists: (usize, usize),
    /// Horizon height as a fraction of H.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Uniform pixel noise amplitude in [0, 1].
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Road width at the bottom edge, fraction of W.
    #[serde(default = "default_road_width")]
    pub road_width: (f64, f64),
    /// Road width at the horizon, fraction of W.
    #[serde(default = "default_road_top_width")]
    pub road_top_width: (f64, f64),
    /// Sidewalk strip width, fraction of W.
    #[serde(default = "default_sidewalk_width")]
    pub sidewalk_width: (f64, f64),
    /// Emit the 4-class roadway label schema (background/road/lane/curb)
    /// instead of background/road/sidewalk.
    #[serde(default)]
    pub roadway4: bool,
}

fn default_size() -> (usize, usize) {
    (96, 128)
}
fn default_cars() -> (usize, usize) {
    (1, 2)
}
fn default_persons() -> (usize, usize) {
    (0, 2)
}
fn default_cyclists() -> (usize, usize) {
    (0, 1)
}
fn default_horizon() -> f64 {
    0.40
}
fn default_noise() -> f64 {
    0.03
}
fn default_road_width() -> (f64, f64) {
    (0.45, 0.75)
}
fn default_road_top_width() -> (f64, f64) {
    (0.06, 0.16)
}
fn default_sidewalk_width() -> (f64, f64) {
    (0.07, 0.14)
}

impl Default for SceneConfig {
    fn default() -> Self {
        serde_json::from_str("{\"seed\": 0}").expect("defaults")
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "scene size {h}x{w} must be positive and divisible by 32"
            )));
        }
        if !(0.1..=0.9).contains(&self.horizon) {
            return Err(Error::Config("horizon fraction must be in [0.1, 0.9]".into()));
        }
        for (lo, hi) in [self.cars, self.persons, self.cyclists] {
            if lo > hi {
                return Err(Error::Config("object count range inverted".into()));
            }
        }
        Ok(())
    }

    pub fn seg_class_names(&self) -> Vec<String> {
        if self.roadway4 {
            SEG_CLASS_NAMES_ROADWAY4.map(String::from).to_vec()
        } else {
            SEG_CLASS_NAMES.map(String::from).to_vec()
        }
    }

    pub fn horizon_row(&self) -> usize {
        (self.horizon * self.size.0 as f64).round() as usize
    }
}

/// One generated scene: interleaved 8-bit RGB, per-pixel labels, normalized
/// ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub seg: Vec<u8>,
    pub boxes: Vec<GtBox>,
    /// Objects skipped because no placement was found in bounded retries.
    pub dropped_objects: usize,
}

impl RawSample {
    /// Image as a `[3, H, W]` tensor scaled to [0, 1].
    pub fn image_tensor<T: Elem>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![T::zero(); 3 * w * h];
        for p in 0..w * h {
            for c in 0..3 {
                data[c * w * h + p] = T::from_f64(self.rgb[p * 3 + c] as f64 / 255.0);
            }
        }
        Tensor::from_vec(data, &[3, h, w]).expect("image tensor")
    }
}

// ---------------------------------------------------------------------------
// Scene drawing
// ---------------------------------------------------------------------------

pub(crate) struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<f64>,
    seg: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            rgb: vec![0.0; 3 * w * h],
            seg: vec![0; w * h],
        }
    }

    fn paint(&mut self, x: usize, y: usize, color: [f64; 3]) {
        let p = y * self.w + x;
        self.rgb[p * 3] = color[0];
        self.rgb[p * 3 + 1] = color[1];
        self.rgb[p * 3 + 2] = color[2];
    }
}

/// Shape of one detection object in pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ObjectShape {
    /// Car: axis-aligned rectangle (cx, cy, half_w, half_h).
    Rect(f64, f64, f64, f64),
    /// Person: filled ellipse (cx, cy, rx, ry).
    Ellipse(f64, f64, f64, f64),
    /// Cyclist: two circles of radius r centered (cx - r, cy) and
    /// (cx + r, cy) plus a connecting bar.
    TwoCircles(f64, f64, f64),
}

impl ObjectShape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            ObjectShape::Rect(cx, cy, hw, hh) => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            ObjectShape::Ellipse(cx, cy, rx, ry) => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            ObjectShape::TwoCircles(cx, cy, r) => {
                let in_circle = |ox: f64| {
                    let dx = x - ox;
                    let dy = y - cy;
                    dx * dx + dy * dy <= r * r
                };
                in_circle(cx - r) || in_circle(cx + r) || ((x - cx).abs() <= r && (y - cy).abs() <= r * 0.25)
            }
        }
    }

    /// Conservative pixel region to rasterize over.
    fn scan_bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            ObjectShape::Rect(cx, cy, hw, hh) => (cx - hw, cy - hh, cx + hw, cy + hh),
            ObjectShape::Ellipse(cx, cy, rx, ry) => (cx - rx, cy - ry, cx + rx, cy + ry),
            ObjectShape::TwoCircles(cx, cy, r) => (cx - 2.0 * r, cy - r, cx + 2.0 * r, cy + r),
        }
    }
}

/// Rasterizes a shape (pixel-center sampling) and returns the inclusive
/// extents of the touched pixels, or `None` when nothing was drawn.
pub(crate) fn draw_shape(
    canvas: &mut Canvas,
    shape: &ObjectShape,
    color: [f64; 3],
) -> Option<(usize, usize, usize, usize)> {
    let (x0, y0, x1, y1) = shape.scan_bounds();
    let xs = (x0.floor().max(0.0)) as usize;
    let ys = (y0.floor().max(0.0)) as usize;
    let xe = (x1.ceil() as usize).min(canvas.w.saturating_sub(1));
    let ye = (y1.ceil() as usize).min(canvas.h.saturating_sub(1));
    let mut extents: Option<(usize, usize, usize, usize)> = None;
    for y in ys..=ye {
        for x in xs..=xe {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                canvas.paint(x, y, color);
                extents = Some(match extents {
                    None => (x, y, x, y),
                    Some((ax0, ay0, ax1, ay1)) => (ax0.min(x), ay0.min(y), ax1.max(x), ay1.max(y)),
                });
            }
        }
    }
    extents
}

fn road_half_width_at(y: f64, horizon: f64, h: f64, bottom_half: f64, top_half: f64) -> f64 {
    // linear interpolation from the horizon to the bottom edge
    let t = ((y - horizon) / (h - horizon)).clamp(0.0, 1.0);
    top_half + (bottom_half - top_half) * t
}

/// Generates sample `index` of the dataset described by `cfg`. Pure in
/// `(cfg, index)`: the same pair always produces the same bytes.
pub fn generate(cfg: &SceneConfig, index: u64) -> Result<RawSample> {
    cfg.validate()?;
    let (h, w) = cfg.size;
    let mut rng = Rng::keyed(cfg.seed, index);
    let mut canvas = Canvas::new(w, h);
    let horizon_px = cfg.horizon_row() as f64;

    // Background: sky above the horizon, ground texture below.
    let sky_top = [0.55 + rng.uniform(-0.05, 0.05), 0.70, 0.85];
    let ground = [0.38 + rng.uniform(-0.04, 0.04), 0.34, 0.22];
    for y in 0..h {
        for x in 0..w {
            let color = if (y as f64) < horizon_px {
                let t = y as f64 / horizon_px.max(1.0);
                [
                    sky_top[0] + 0.25 * t,
                    sky_top[1] + 0.18 * t,
                    sky_top[2] + 0.10 * t,
                ]
            } else {
                ground
            };
            canvas.paint(x, y, color);
        }
    }

    // Road trapezoid with flanking strips (sidewalks, or curbs + a lane
    // line in the 4-class variant).
    let center_x = w as f64 * rng.uniform(0.40, 0.60);
    let bottom_half = w as f64 * rng.uniform(cfg.road_width.0, cfg.road_width.1) / 2.0;
    let top_half = w as f64 * rng.uniform(cfg.road_top_width.0, cfg.road_top_width.1) / 2.0;
    let strip_w = w as f64 * rng.uniform(cfg.sidewalk_width.0, cfg.sidewalk_width.1);
    let road_gray = rng.uniform(0.22, 0.32);
    let strip_tone = rng.uniform(0.55, 0.68);
    let horizon_row = cfg.horizon_row();
    for y in horizon_row..h {
        let half = road_half_width_at(y as f64, horizon_px, h as f64, bottom_half, top_half);
        let strip = strip_w * (0.3 + 0.7 * ((y as f64 - horizon_px) / (h as f64 - horizon_px)));
        for x in 0..w {
            let dx = x as f64 - center_x;
            let p = y * w + x;
            if dx.abs() <= half {
                canvas.paint(x, y, [road_gray, road_gray, road_gray + 0.02]);
                canvas.seg[p] = 1;
                if cfg.roadway4 && dx.abs() <= (half * 0.04).max(0.8) {
                    // dashed center lane line
                    if (y / 4) % 2 == 0 {
                        canvas.paint(x, y, [0.85, 0.85, 0.75]);
                        canvas.seg[p] = 2;
                    }
                }
            } else if dx.abs() <= half + strip {
                if cfg.roadway4 {
                    canvas.paint(x, y, [strip_tone, strip_tone * 0.82, strip_tone * 0.72]);
                    canvas.seg[p] = 3;
                } else {
                    canvas.paint(x, y, [strip_tone, strip_tone * 0.92, strip_tone * 0.95]);
                    canvas.seg[p] = 2;
                }
            }
        }
    }

    // Objects: class counts drawn from the config ranges, placed below the
    // horizon with at most one object per 32-px grid cell (the detector's
    // assignment granularity), bounded retries, then dropped.
    let counts = [
        (0usize, rng.uniform_usize(cfg.cars.0, cfg.cars.1)),
        (1, rng.uniform_usize(cfg.persons.0, cfg.persons.1)),
        (2, rng.uniform_usize(cfg.cyclists.0, cfg.cyclists.1)),
    ];
    let grid = (h / 32, w / 32);
    let mut used_cells = vec![false; grid.0 * grid.1];
    let mut boxes = Vec::new();
    let mut dropped = 0usize;

    for (class_idx, count) in counts {
        for _ in 0..count {
            let mut placed = false;
            for _try in 0..24 {
                let cx = rng.uniform(0.10, 0.90) * w as f64;
                let cy = rng.uniform(horizon_px / h as f64 + 0.08, 0.90) * h as f64;
                let shape = match class_idx {
                    0 => {
                        let hw = w as f64 * rng.uniform(0.055, 0.115);
                        let hh = hw * rng.uniform(0.55, 0.8);
                        ObjectShape::Rect(cx, cy, hw, hh)
                    }
                    1 => {
                        let ry = h as f64 * rng.uniform(0.09, 0.16);
                        let rx = ry * rng.uniform(0.28, 0.42);
                        ObjectShape::Ellipse(cx, cy, rx, ry)
                    }
                    _ => {
                        let r = w as f64 * rng.uniform(0.035, 0.06);
                        ObjectShape::TwoCircles(cx, cy, r)
                    }
                };
                let (sx0, sy0, sx1, sy1) = shape.scan_bounds();
                if sx0 < 1.0 || sy0 < 1.0 || sx1 >= (w - 1) as f64 || sy1 >= (h - 1) as f64 {
                    continue;
                }
                let gx = ((cx / 32.0) as usize).min(grid.1 - 1);
                let gy = ((cy / 32.0) as usize).min(grid.0 - 1);
                if used_cells[gy * grid.1 + gx] {
                    continue;
                }
                let color = match class_idx {
                    0 => {
                        // saturated car body color
                        let palette = [
                            [0.85, 0.10, 0.10],
                            [0.10, 0.20, 0.85],
                            [0.90, 0.90, 0.92],
                            [0.12, 0.12, 0.14],
                            [0.75, 0.55, 0.05],
                        ];
                        palette[rng.uniform_usize(0, palette.len() - 1)]
                    }
                    1 => [0.95, rng.uniform(0.45, 0.60), 0.15],
                    _ => [0.05, rng.uniform(0.75, 0.9), 0.85],
                };
                if let Some((ex0, ey0, ex1, ey1)) = draw_shape(&mut canvas, &shape, color) {
                    // Bounding box from rasterized extents (inclusive pixel
                    // range -> half-open pixel box).
                    let bw = (ex1 - ex0 + 1) as f64;
                    let bh = (ey1 - ey0 + 1) as f64;
                    boxes.push(GtBox {
                        class_idx,
                        cx: (ex0 as f64 + bw / 2.0) / w as f64,
                        cy: (ey0 as f64 + bh / 2.0) / h as f64,
                        w: bw / w as f64,
                        h: bh / h as f64,
                    });
                    used_cells[gy * grid.1 + gx] = true;
                    placed = true;
                    break;
                }
            }
            if !placed {
                dropped += 1;
            }
        }
    }

    // Uniform pixel noise, quantization to 8 bits.
    let mut rgb = vec![0u8; 3 * w * h];
    for (i, v) in canvas.rgb.iter().enumerate() {
        let noisy = v + rng.uniform(-cfg.noise, cfg.noise);
        rgb[i] = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
    }

    Ok(RawSample {
        id: format!("{index:06}"),
        width: w,
        height: h,
        rgb,
        seg: canvas.seg,
        boxes,
        dropped_objects: dropped,
    })
}

// ---------------------------------------------------------------------------
// PPM / PGM codecs (binary, maxval 255)
// ---------------------------------------------------------------------------

fn encode_pnm(magic: &str, w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

pub fn encode_ppm(rgb: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    if rgb.len() != 3 * w * h {
        return Err(Error::shape("ppm", "payload size mismatch"));
    }
    Ok(encode_pnm("P6", w, h, rgb))
}

pub fn encode_pgm(gray: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    if gray.len() != w * h {
        return Err(Error::shape("pgm", "payload size mismatch"));
    }
    Ok(encode_pnm("P5", w, h, gray))
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize, format: &'static str) -> Result<u64> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(format, "expected numeric header field"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(format, "bad numeric header field"))
}

fn decode_pnm(bytes: &[u8], magic: &[u8], channels: usize, format: &'static str) -> Result<(Vec<u8>, usize, usize)> {
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(Error::format(format, "bad magic"));
    }
    let mut pos = 2;
    let w = next_token(bytes, &mut pos, format)? as usize;
    let h = next_token(bytes, &mut pos, format)? as usize;
    let maxval = next_token(bytes, &mut pos, format)?;
    if maxval != 255 {
        return Err(Error::format(format, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(format, "missing header terminator"));
    }
    pos += 1;
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::format(format, "truncated payload"));
    }
    Ok((bytes[pos..pos + need].to_vec(), w, h))
}

/// Binary P6, maxval 255. Returns (interleaved RGB, width, height).
pub fn decode_ppm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    decode_pnm(bytes, b"P6", 3, "ppm")
}

/// Binary P5, maxval 255. Returns (gray bytes, width, height).
pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    decode_pnm(bytes, b"P5", 1, "pgm")
}

pub fn write_ppm_file(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    std::fs::write(path, encode_ppm(rgb, w, h)?)?;
    Ok(())
}

pub fn read_ppm_file(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_pgm_file(path: &Path, gray: &[u8], w: usize, h: usize) -> Result<()> {
    std::fs::write(path, encode_pgm(gray, w, h)?)?;
    Ok(())
}

pub fn read_pgm_file(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    decode_pgm(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// KITTI label format
// ---------------------------------------------------------------------------

/// One line of a KITTI label file (15 whitespace-separated fields).
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub kind: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// (x1, y1, x2, y2) pixels.
    pub bbox: (f64, f64, f64, f64),
    /// (height, width, length) meters.
    pub dimensions: (f64, f64, f64),
    /// (x, y, z) camera coordinates.
    pub location: (f64, f64, f64),
    pub rotation_y: f64,
}

impl KittiLabel {
    pub fn is_dont_care(&self) -> bool {
        self.kind == "DontCare"
    }

    pub fn emit(&self) -> String {
        format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            self.kind,
            self.truncation,
            self.occlusion,
            self.alpha,
            self.bbox.0,
            self.bbox.1,
            self.bbox.2,
            self.bbox.3,
            self.dimensions.0,
            self.dimensions.1,
            self.dimensions.2,
            self.location.0,
            self.location.1,
            self.location.2,
            self.rotation_y
        )
    }
}

pub fn parse_kitti_label(line: &str) -> Result<KittiLabel> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 15 {
        return Err(Error::format(
            "kitti",
            format!("expected 15 fields, got {}", fields.len()),
        ));
    }
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .parse()
            .map_err(|_| Error::format("kitti", format!("field {i} is not numeric: {}", fields[i])))
    };
    Ok(KittiLabel {
        kind: fields[0].to_string(),
        truncation: num(1)?,
        occlusion: num(2)? as i32,
        alpha: num(3)?,
        bbox: (num(4)?, num(5)?, num(6)?, num(7)?),
        dimensions: (num(8)?, num(9)?, num(10)?),
        location: (num(11)?, num(12)?, num(13)?),
        rotation_y: num(14)?,
    })
}

/// Converts a KITTI pixel box into a normalized training box. `DontCare`
/// entries, unknown classes and degenerate boxes (under one pixel) yield
/// `None`.
pub fn kitti_to_gtbox(
    label: &KittiLabel,
    img_size: (usize, usize),
    class_map: &BTreeMap<String, usize>,
) -> Option<GtBox> {
    if label.is_dont_care() {
        return None;
    }
    let class_idx = *class_map.get(&label.kind)?;
    let (x1, y1, x2, y2) = label.bbox;
    let (w_px, h_px) = (x2 - x1, y2 - y1);
    if w_px < 1.0 || h_px < 1.0 {
        return None;
    }
    let (img_w, img_h) = (img_size.0 as f64, img_size.1 as f64);
    Some(GtBox {
        class_idx,
        cx: (x1 + w_px / 2.0) / img_w,
        cy: (y1 + h_px / 2.0) / img_h,
        w: w_px / img_w,
        h: h_px / img_h,
    })
}

// ---------------------------------------------------------------------------
// Resizing (corner-aligned)
// ---------------------------------------------------------------------------

fn src_coord(dst: usize, dst_len: usize, src_len: usize) -> f64 {
    if dst_len <= 1 {
        0.0
    } else {
        dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    }
}

/// Corner-aligned bilinear resize of an interleaved 8-bit image.
pub fn resize_bilinear_u8(
    input: &[u8],
    (w, h): (usize, usize),
    (tw, th): (usize, usize),
    channels: usize,
) -> Result<Vec<u8>> {
    if input.len() != w * h * channels || tw == 0 || th == 0 {
        return Err(Error::shape("resize", "bad buffer or target dims"));
    }
    let mut out = vec![0u8; tw * th * channels];
    for y in 0..th {
        let sy = src_coord(y, th, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..tw {
            let sx = src_coord(x, tw, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..channels {
                let at = |xx: usize, yy: usize| input[(yy * w + xx) * channels + c] as f64;
                let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + at(x1, y0) * fx * (1.0 - fy)
                    + at(x0, y1) * (1.0 - fx) * fy
                    + at(x1, y1) * fx * fy;
                out[(y * tw + x) * channels + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resize for label maps (corner-aligned grid).
pub fn resize_nearest_labels(
    input: &[u8],
    (w, h): (usize, usize),
    (tw, th): (usize, usize),
) -> Result<Vec<u8>> {
    if input.len() != w * h || tw == 0 || th == 0 {
        return Err(Error::shape("resize", "bad buffer or target dims"));
    }
    let mut out = vec![0u8; tw * th];
    for y in 0..th {
        let sy = src_coord(y, th, h).round() as usize;
        for x in 0..tw {
            let sx = src_coord(x, tw, w).round() as usize;
            out[y * tw + x] = input[sy.min(h - 1) * w + sx.min(w - 1)];
        }
    }
    Ok(out)
}

/// Linear rescale of a pixel box between image sizes.
pub fn rescale_box_px(
    (x1, y1, x2, y2): (f64, f64, f64, f64),
    from: (usize, usize),
    to: (usize, usize),
) -> (f64, f64, f64, f64) {
    let sx = to.0 as f64 / from.0 as f64;
    let sy = to.1 as f64 / from.1 as f64;
    (x1 * sx, y1 * sy, x2 * sx, y2 * sy)
}

// ---------------------------------------------------------------------------
// Dataset directory I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: SceneConfig,
    pub count: u64,
    /// SHA-256 of every data file, keyed by relative path.
    pub checksums: BTreeMap<String, String>,
    /// SHA-256 over all per-file checksums, in path order.
    pub total_checksum: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn boxes_to_jsonl(boxes: &[GtBox]) -> Result<String> {
    let mut out = String::new();
    for b in boxes {
        let name = DET_CLASS_NAMES.get(b.class_idx).copied().unwrap_or("unknown");
        let line = serde_json::json!({
            "class": name,
            "class_idx": b.class_idx,
            "cx": b.cx,
            "cy": b.cy,
            "w": b.w,
            "h": b.h,
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn boxes_from_jsonl(text: &str) -> Result<Vec<GtBox>> {
    let mut boxes = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)?;
        let f = |key: &str| -> Result<f64> {
            v.get(key)
                .and_then(|x| x.as_f64())
                .ok_or_else(|| Error::format("jsonl", format!("missing field {key}")))
        };
        boxes.push(GtBox {
            class_idx: f("class_idx")? as usize,
            cx: f("cx")?,
            cy: f("cy")?,
            w: f("w")?,
            h: f("h")?,
        });
    }
    Ok(boxes)
}

/// Generates `count` samples into `dir` and writes `meta.json`.
pub fn write_dataset(cfg: &SceneConfig, count: u64, dir: &Path) -> Result<DatasetMeta> {
    cfg.validate()?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("seg"))?;
    std::fs::create_dir_all(dir.join("boxes"))?;

    let mut checksums = BTreeMap::new();
    for index in 0..count {
        let sample = generate(cfg, index)?;
        let image = encode_ppm(&sample.rgb, sample.width, sample.height)?;
        let seg = encode_pgm(&sample.seg, sample.width, sample.height)?;
        let boxes = boxes_to_jsonl(&sample.boxes)?.into_bytes();
        for (rel, bytes) in [
            (format!("images/{}.ppm", sample.id), &image),
            (format!("seg/{}.pgm", sample.id), &seg),
            (format!("boxes/{}.jsonl", sample.id), &boxes),
        ] {
            std::fs::write(dir.join(&rel), bytes)?;
            checksums.insert(rel, sha256_hex(bytes));
        }
    }

    let mut all = String::new();
    for (path, sum) in &checksums {
        all.push_str(path);
        all.push(' ');
        all.push_str(sum);
        all.push('\n');
    }
    let meta = DatasetMeta {
        config: cfg.clone(),
        count,
        total_checksum: sha256_hex(all.as_bytes()),
        checksums,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<RawSample>)> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let mut samples = Vec::with_capacity(meta.count as usize);
    for index in 0..meta.count {
        let id = format!("{index:06}");
        let (rgb, w, h) = read_ppm_file(&dir.join(format!("images/{id}.ppm")))?;
        let (seg, sw, sh) = read_pgm_file(&dir.join(format!("seg/{id}.pgm")))?;
        if (sw, sh) != (w, h) {
            return Err(Error::format("dataset", format!("{id}: image/label size mismatch")));
        }
        let boxes = boxes_from_jsonl(&std::fs::read_to_string(dir.join(format!("boxes/{id}.jsonl")))?)?;
        samples.push(RawSample {
            id,
            width: w,
            height: h,
            rgb,
            seg,
            boxes,
            dropped_objects: 0,
        });
    }
    Ok((meta, samples))
}
