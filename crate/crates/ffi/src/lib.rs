//! C ABI over the mtlnet pipeline: opaque handles, status codes, and a
//! thread-local last-error message.
//!
//! Handles own their data; every `*_new`/`*_build`/`*_load` has a matching
//! `*_free`, and passing a handle to any function after freeing it is
//! undefined behavior, as is passing pointers that do not satisfy the
//! documented sizes. All functions are safe to call from multiple threads
//! as long as each handle is used by one thread at a time; the tensor math
//! is `f32` on this surface.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use mtlnet::error::Error;
use mtlnet::fisheye::{build_rectify_map, DistortionModel, RectifyMap};
use mtlnet::model::{self, Head, ModelParams, ModelSpec};
use mtlnet::postproc;
use mtlnet::tensor::ops::Mode;
use mtlnet::tensor::Tensor;

/// Result of every fallible call. Non-OK codes leave a message readable
/// via `mtl_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IoError = 3,
    RuntimeError = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> MtlStatus {
    match err {
        Error::Io(_) => MtlStatus::IoError,
        Error::InvalidArg(_) | Error::Config(_) | Error::ShapeMismatch { .. } => {
            MtlStatus::InvalidArgument
        }
        _ => MtlStatus::RuntimeError,
    }
}

fn fail(err: Error) -> MtlStatus {
    set_error(&err.to_string());
    status_of(&err)
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, MtlStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(MtlStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not UTF-8");
        MtlStatus::InvalidArgument
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last error on this thread; valid until the next failing
/// call on the same thread. Never NULL.
#[no_mangle]
pub extern "C" fn mtl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Model handle
// ---------------------------------------------------------------------------

/// Opaque model handle: architecture spec plus `f32` parameters.
pub struct MtlModel {
    spec: ModelSpec,
    params: ModelParams<f32>,
}

/// One decoded, NMS-filtered detection in pixel coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MtlDetection {
    pub class_idx: i32,
    pub score: f32,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

/// Builds a model with seeded random initialization from a spec JSON
/// document (pass `"{}"` for the defaults). The handle must be released
/// with `mtl_model_free`.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_build(
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut MtlModel,
) -> MtlStatus {
    if out.is_null() {
        set_error("null output pointer");
        return MtlStatus::NullPointer;
    }
    let json = match cstr_arg(spec_json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let spec = match ModelSpec::from_json(json) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    match model::build::<f32>(&spec, seed) {
        Ok(params) => {
            *out = Box::into_raw(Box::new(MtlModel { spec, params }));
            MtlStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Loads a model from a spec JSON file and a `.mtlw` checkpoint.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_load(
    spec_json_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut MtlModel,
) -> MtlStatus {
    if out.is_null() {
        set_error("null output pointer");
        return MtlStatus::NullPointer;
    }
    let spec_path = match cstr_arg(spec_json_path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let ckpt_path = match cstr_arg(checkpoint_path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let load = || -> Result<MtlModel, Error> {
        let spec = ModelSpec::from_json(&std::fs::read_to_string(spec_path)?)?;
        let params = model::load_checkpoint_file::<f32>(&spec, Path::new(ckpt_path))?;
        Ok(MtlModel { spec, params })
    };
    match load() {
        Ok(m) => {
            *out = Box::into_raw(Box::new(m));
            MtlStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Writes the model's parameters as a `.mtlw` checkpoint.
///
/// # Safety
/// `model` must be a live handle, `checkpoint_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_save(
    model: *const MtlModel,
    checkpoint_path: *const c_char,
) -> MtlStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model handle");
        return MtlStatus::NullPointer;
    };
    let path = match cstr_arg(checkpoint_path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    match model::save_checkpoint_file(&model.params, &model.spec, Path::new(path)) {
        Ok(()) => MtlStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Input resolution the model expects.
///
/// # Safety
/// `model` must be a live handle; `height`/`width` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_input_size(
    model: *const MtlModel,
    height: *mut u32,
    width: *mut u32,
) -> MtlStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model handle");
        return MtlStatus::NullPointer;
    };
    if height.is_null() || width.is_null() {
        set_error("null output pointer");
        return MtlStatus::NullPointer;
    }
    *height = model.spec.input_size.0 as u32;
    *width = model.spec.input_size.1 as u32;
    MtlStatus::Ok
}

/// # Safety
/// `model` must come from `mtl_model_build`/`mtl_model_load` and not have
/// been freed already. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_free(model: *mut MtlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs eval-mode inference on an interleaved 8-bit RGB image of the
/// model's input size.
///
/// * `seg_out` (optional, may be NULL): `height*width` bytes receiving the
///   per-pixel class index.
/// * `det_out`/`det_capacity`: buffer for NMS-filtered detections; at most
///   `det_capacity` entries are written and `det_count` receives the number
///   written. A capacity of `64` is enough for every practical scene.
///
/// # Safety
/// `rgb` must hold `height*width*3` bytes; buffers must match the sizes
/// described above; the handle must be live.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_infer(
    model: *const MtlModel,
    rgb: *const u8,
    height: u32,
    width: u32,
    score_thresh: f32,
    nms_iou: f32,
    seg_out: *mut u8,
    det_out: *mut MtlDetection,
    det_capacity: u32,
    det_count: *mut u32,
) -> MtlStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model handle");
        return MtlStatus::NullPointer;
    };
    if rgb.is_null() {
        set_error("null image pointer");
        return MtlStatus::NullPointer;
    }
    let (h, w) = (height as usize, width as usize);
    if (h, w) != model.spec.input_size {
        set_error("image size does not match the model input size");
        return MtlStatus::InvalidArgument;
    }
    let rgb = std::slice::from_raw_parts(rgb, h * w * 3);

    let mut planar = vec![0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            planar[c * h * w + p] = rgb[p * 3 + c] as f32 / 255.0;
        }
    }
    let run = || -> Result<(Option<Vec<u8>>, Vec<postproc::Detection>), Error> {
        let image = Tensor::from_vec(planar, &[1, 3, h, w])?;
        let feats = model::forward_encoder(&model.params, &model.spec, &image, Mode::Eval)?;
        let seg = if model.spec.heads.contains(&Head::Seg) && !seg_out.is_null() {
            let logits = model::forward_seg(&model.params, &model.spec, &feats)?;
            let masks = postproc::seg_argmax(&logits, None)?;
            Some(masks.into_iter().next().expect("one image").classes)
        } else {
            None
        };
        let dets = if model.spec.heads.contains(&Head::Det) {
            let raw = model::forward_det(&model.params, &model.spec, &feats, Mode::Eval)?;
            let decoded = postproc::decode_boxes(
                &raw,
                &model.spec.anchors,
                model.spec.det_classes.len(),
                (w, h),
            )?;
            postproc::nms(&decoded[0], nms_iou as f64, score_thresh as f64)
        } else {
            Vec::new()
        };
        Ok((seg, dets))
    };
    match run() {
        Ok((seg, dets)) => {
            if let Some(mask) = seg {
                std::ptr::copy_nonoverlapping(mask.as_ptr(), seg_out, h * w);
            }
            let written = dets.len().min(det_capacity as usize);
            if written > 0 {
                if det_out.is_null() {
                    set_error("null detection buffer with non-zero results");
                    return MtlStatus::NullPointer;
                }
                let out = std::slice::from_raw_parts_mut(det_out, written);
                for (dst, d) in out.iter_mut().zip(&dets) {
                    *dst = MtlDetection {
                        class_idx: d.class_idx as i32,
                        score: d.score as f32,
                        x1: d.bbox.x1 as f32,
                        y1: d.bbox.y1 as f32,
                        x2: d.bbox.x2 as f32,
                        y2: d.bbox.y2 as f32,
                    };
                }
            }
            if !det_count.is_null() {
                *det_count = written as u32;
            }
            MtlStatus::Ok
        }
        Err(e) => fail(e),
    }
}

// ---------------------------------------------------------------------------
// Fisheye rectifier handle
// ---------------------------------------------------------------------------

/// Opaque rectifier: a validated distortion model plus the cached
/// per-pixel source map for one output size.
pub struct MtlRectifier {
    model: DistortionModel,
    map: RectifyMap,
    height: usize,
    width: usize,
}

/// Builds a rectifier for `height x width` images from polynomial radial
/// coefficients `k[4]`, principal point (`cx`, `cy`) and focal length in
/// pixels. Fails when the polynomial is not strictly increasing on
/// `[0, max_valid_radius]`.
///
/// # Safety
/// `k` must point to 4 doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mtl_rectifier_new(
    k: *const f64,
    cx: f64,
    cy: f64,
    focal: f64,
    max_valid_radius: f64,
    height: u32,
    width: u32,
    out: *mut *mut MtlRectifier,
) -> MtlStatus {
    if k.is_null() || out.is_null() {
        set_error("null pointer argument");
        return MtlStatus::NullPointer;
    }
    let coeffs = std::slice::from_raw_parts(k, 4);
    let model = match DistortionModel::new(
        [coeffs[0], coeffs[1], coeffs[2], coeffs[3]],
        (cx, cy),
        focal,
        max_valid_radius,
    ) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let (h, w) = (height as usize, width as usize);
    let map = build_rectify_map(&model, (w, h));
    *out = Box::into_raw(Box::new(MtlRectifier {
        model,
        map,
        height: h,
        width: w,
    }));
    MtlStatus::Ok
}

/// # Safety
/// `rect` must come from `mtl_rectifier_new`; NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn mtl_rectifier_free(rect: *mut MtlRectifier) {
    if !rect.is_null() {
        drop(Box::from_raw(rect));
    }
}

/// Rectifies an interleaved 8-bit RGB image in place of the distortion:
/// `rgb_out` receives `height*width*3` bytes; `valid_out` (optional, may
/// be NULL) receives `height*width` validity flags (0/1).
///
/// # Safety
/// Buffers must match the rectifier's size; the handle must be live.
#[no_mangle]
pub unsafe extern "C" fn mtl_rectifier_apply(
    rect: *const MtlRectifier,
    rgb_in: *const u8,
    rgb_out: *mut u8,
    valid_out: *mut u8,
) -> MtlStatus {
    let Some(rect) = rect.as_ref() else {
        set_error("null rectifier handle");
        return MtlStatus::NullPointer;
    };
    if rgb_in.is_null() || rgb_out.is_null() {
        set_error("null image pointer");
        return MtlStatus::NullPointer;
    }
    let n = rect.height * rect.width;
    let input = std::slice::from_raw_parts(rgb_in, n * 3);
    match rect.map.apply_u8(input, rect.width, rect.height, 3) {
        Ok((out, mask)) => {
            std::ptr::copy_nonoverlapping(out.as_ptr(), rgb_out, n * 3);
            if !valid_out.is_null() {
                let valid = std::slice::from_raw_parts_mut(valid_out, n);
                for (dst, v) in valid.iter_mut().zip(&mask) {
                    *dst = u8::from(*v);
                }
            }
            MtlStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Forward distortion of one normalized point.
///
/// # Safety
/// `rect` must be live; `out_x`/`out_y` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mtl_distort_point(
    rect: *const MtlRectifier,
    x: f64,
    y: f64,
    out_x: *mut f64,
    out_y: *mut f64,
) -> MtlStatus {
    let Some(rect) = rect.as_ref() else {
        set_error("null rectifier handle");
        return MtlStatus::NullPointer;
    };
    if out_x.is_null() || out_y.is_null() {
        set_error("null output pointer");
        return MtlStatus::NullPointer;
    }
    match rect.model.distort_point((x, y)) {
        Ok((dx, dy)) => {
            *out_x = dx;
            *out_y = dy;
            MtlStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Inverse distortion of one normalized point (damped Newton iteration).
///
/// # Safety
/// `rect` must be live; `out_x`/`out_y` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mtl_undistort_point(
    rect: *const MtlRectifier,
    x: f64,
    y: f64,
    out_x: *mut f64,
    out_y: *mut f64,
) -> MtlStatus {
    let Some(rect) = rect.as_ref() else {
        set_error("null rectifier handle");
        return MtlStatus::NullPointer;
    };
    if out_x.is_null() || out_y.is_null() {
        set_error("null output pointer");
        return MtlStatus::NullPointer;
    }
    match rect.model.undistort_point((x, y)) {
        Ok((ux, uy)) => {
            *out_x = ux;
            *out_y = uy;
            MtlStatus::Ok
        }
        Err(e) => fail(e),
    }
}
