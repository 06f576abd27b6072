//! Exercises the C ABI exactly as a foreign caller would: through raw
//! pointers and status codes.

use std::ffi::{CStr, CString};

use mtlnet_ffi::*;

fn cstring(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn version_and_default_error_are_readable() {
    unsafe {
        let v = CStr::from_ptr(mtl_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
        let e = CStr::from_ptr(mtl_last_error()).to_str().unwrap();
        assert!(e.is_empty());
    }
}

#[test]
fn build_infer_save_load_round_trip() {
    let spec = cstring(
        "{\"input_size\": [32, 64], \"width_mult\": 0.25, \
         \"anchors\": [[0.5, 0.5], [1.0, 1.0]]}",
    );
    unsafe {
        let mut model: *mut MtlModel = std::ptr::null_mut();
        assert_eq!(mtl_model_build(spec.as_ptr(), 7, &mut model), MtlStatus::Ok);
        assert!(!model.is_null());

        let (mut h, mut w) = (0u32, 0u32);
        assert_eq!(mtl_model_input_size(model, &mut h, &mut w), MtlStatus::Ok);
        assert_eq!((h, w), (32, 64));

        let rgb = vec![127u8; 32 * 64 * 3];
        let mut seg = vec![255u8; 32 * 64];
        let mut dets = vec![
            MtlDetection {
                class_idx: -1,
                score: 0.0,
                x1: 0.0,
                y1: 0.0,
                x2: 0.0,
                y2: 0.0,
            };
            64
        ];
        let mut count = u32::MAX;
        let status = mtl_model_infer(
            model,
            rgb.as_ptr(),
            32,
            64,
            0.0,
            0.45,
            seg.as_mut_ptr(),
            dets.as_mut_ptr(),
            dets.len() as u32,
            &mut count,
        );
        assert_eq!(status, MtlStatus::Ok);
        assert!(count <= 64);
        assert!(seg.iter().all(|&c| c < 3), "mask holds class indices");
        for d in &dets[..count as usize] {
            assert!(d.class_idx >= 0 && (d.class_idx as usize) < 3);
            assert!(d.x1 <= d.x2 && d.y1 <= d.y2);
            assert!((0.0..=1.0).contains(&d.score));
        }

        // save / load round trip preserves inference output bits
        let dir = std::env::temp_dir().join(format!("mtlffi-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = cstring(dir.join("m.mtlw").to_str().unwrap());
        assert_eq!(mtl_model_save(model, ckpt.as_ptr()), MtlStatus::Ok);
        let spec_path = dir.join("m.json");
        std::fs::write(
            &spec_path,
            "{\"input_size\": [32, 64], \"width_mult\": 0.25, \
             \"anchors\": [[0.5, 0.5], [1.0, 1.0]]}",
        )
        .unwrap();
        let spec_path = cstring(spec_path.to_str().unwrap());
        let mut reloaded: *mut MtlModel = std::ptr::null_mut();
        assert_eq!(
            mtl_model_load(spec_path.as_ptr(), ckpt.as_ptr(), &mut reloaded),
            MtlStatus::Ok
        );
        let mut seg2 = vec![255u8; 32 * 64];
        let mut count2 = 0u32;
        assert_eq!(
            mtl_model_infer(
                reloaded,
                rgb.as_ptr(),
                32,
                64,
                0.0,
                0.45,
                seg2.as_mut_ptr(),
                dets.as_mut_ptr(),
                dets.len() as u32,
                &mut count2,
            ),
            MtlStatus::Ok
        );
        assert_eq!(seg, seg2);
        assert_eq!(count, count2);

        mtl_model_free(model);
        mtl_model_free(reloaded);
        mtl_model_free(std::ptr::null_mut()); // NULL is a no-op
        let _ = std::fs::remove_dir_all(&dir);
    }
}

#[test]
fn error_paths_set_status_and_message() {
    unsafe {
        let mut model: *mut MtlModel = std::ptr::null_mut();
        assert_eq!(
            mtl_model_build(std::ptr::null(), 0, &mut model),
            MtlStatus::NullPointer
        );
        let bad = cstring("{\"width_mult\": 7.0}");
        assert_eq!(
            mtl_model_build(bad.as_ptr(), 0, &mut model),
            MtlStatus::InvalidArgument
        );
        let msg = CStr::from_ptr(mtl_last_error()).to_str().unwrap();
        assert!(msg.contains("width_mult"), "got: {msg}");

        let missing = cstring("/nonexistent/spec.json");
        let ckpt = cstring("/nonexistent/ckpt.mtlw");
        assert_eq!(
            mtl_model_load(missing.as_ptr(), ckpt.as_ptr(), &mut model),
            MtlStatus::IoError
        );

        // wrong image size is rejected
        let spec = cstring("{\"input_size\": [32, 32], \"width_mult\": 0.25}");
        assert_eq!(mtl_model_build(spec.as_ptr(), 1, &mut model), MtlStatus::Ok);
        let rgb = vec![0u8; 64 * 64 * 3];
        let mut count = 0u32;
        assert_eq!(
            mtl_model_infer(
                model,
                rgb.as_ptr(),
                64,
                64,
                0.5,
                0.45,
                std::ptr::null_mut(),
                std::ptr::null_mut(),
                0,
                &mut count,
            ),
            MtlStatus::InvalidArgument
        );
        mtl_model_free(model);
    }
}

#[test]
fn rectifier_identity_and_point_round_trip() {
    unsafe {
        let k = [0.08f64, 0.01, 0.0, 0.0];
        let mut rect: *mut MtlRectifier = std::ptr::null_mut();
        assert_eq!(
            mtl_rectifier_new(k.as_ptr(), 24.0, 16.0, 20.0, 2.0, 32, 48, &mut rect),
            MtlStatus::Ok
        );

        let (mut dx, mut dy) = (0.0f64, 0.0f64);
        assert_eq!(
            mtl_distort_point(rect, 0.4, -0.3, &mut dx, &mut dy),
            MtlStatus::Ok
        );
        let (mut ux, mut uy) = (0.0f64, 0.0f64);
        assert_eq!(
            mtl_undistort_point(rect, dx, dy, &mut ux, &mut uy),
            MtlStatus::Ok
        );
        assert!((ux - 0.4).abs() < 1e-8 && (uy + 0.3).abs() < 1e-8);

        let rgb = vec![200u8; 32 * 48 * 3];
        let mut out = vec![0u8; 32 * 48 * 3];
        let mut valid = vec![0u8; 32 * 48];
        assert_eq!(
            mtl_rectifier_apply(rect, rgb.as_ptr(), out.as_mut_ptr(), valid.as_mut_ptr()),
            MtlStatus::Ok
        );
        assert!(valid.iter().any(|&v| v == 1));
        mtl_rectifier_free(rect);

        // non-monotone polynomial is rejected at construction
        let bad = [-0.5f64, 0.0, 0.0, 0.0];
        let status = mtl_rectifier_new(bad.as_ptr(), 0.0, 0.0, 1.0, 1.5, 8, 8, &mut rect);
        assert_eq!(status, MtlStatus::InvalidArgument);
    }
}

#[test]
fn generated_header_exports_every_symbol() {
    let header = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/include/mtlnet.h"
    ))
    .expect("include/mtlnet.h is generated at build time");
    for symbol in [
        "mtl_version",
        "mtl_last_error",
        "mtl_model_build",
        "mtl_model_load",
        "mtl_model_save",
        "mtl_model_input_size",
        "mtl_model_free",
        "mtl_model_infer",
        "mtl_rectifier_new",
        "mtl_rectifier_free",
        "mtl_rectifier_apply",
        "mtl_distort_point",
        "mtl_undistort_point",
        "MtlStatus",
        "MtlDetection",
    ] {
        assert!(header.contains(symbol), "{symbol} missing from header");
    }
}
