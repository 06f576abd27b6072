#ifndef MTLNET_H
#define MTLNET_H

/* Generated by cbindgen from mtlnet-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Non-OK codes leave a message readable
// via `mtl_last_error`.
typedef enum MtlStatus {
  MTL_STATUS_OK = 0,
  MTL_STATUS_NULL_POINTER = 1,
  MTL_STATUS_INVALID_ARGUMENT = 2,
  MTL_STATUS_IO_ERROR = 3,
  MTL_STATUS_RUNTIME_ERROR = 4,
} MtlStatus;

// Opaque model handle: architecture spec plus `f32` parameters.
typedef struct MtlModel MtlModel;

// Opaque rectifier: a validated distortion model plus the cached
// per-pixel source map for one output size.
typedef struct MtlRectifier MtlRectifier;

// One decoded, NMS-filtered detection in pixel coordinates.
typedef struct MtlDetection {
  int32_t class_idx;
  float score;
  float x1;
  float y1;
  float x2;
  float y2;
} MtlDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mtl_version(void);

// Message of the last error on this thread; valid until the next failing
// call on the same thread. Never NULL.
const char *mtl_last_error(void);

// Builds a model with seeded random initialization from a spec JSON
// document (pass `"{}"` for the defaults). The handle must be released
// with `mtl_model_free`.
//
// # Safety
// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
enum MtlStatus mtl_model_build(const char *spec_json, uint64_t seed, struct MtlModel **out);

// Loads a model from a spec JSON file and a `.mtlw` checkpoint.
//
// # Safety
// Both paths must be NUL-terminated strings; `out` must be valid.
enum MtlStatus mtl_model_load(const char *spec_json_path,
                              const char *checkpoint_path,
                              struct MtlModel **out);

// Writes the model's parameters as a `.mtlw` checkpoint.
//
// # Safety
// `model` must be a live handle, `checkpoint_path` NUL-terminated.
enum MtlStatus mtl_model_save(const struct MtlModel *model, const char *checkpoint_path);

// Input resolution the model expects.
//
// # Safety
// `model` must be a live handle; `height`/`width` must be valid pointers.
enum MtlStatus mtl_model_input_size(const struct MtlModel *model,
                                    uint32_t *height,
                                    uint32_t *width);

// # Safety
// `model` must come from `mtl_model_build`/`mtl_model_load` and not have
// been freed already. NULL is a no-op.
void mtl_model_free(struct MtlModel *model);

// Runs eval-mode inference on an interleaved 8-bit RGB image of the
// model's input size.
//
// * `seg_out` (optional, may be NULL): `height*width` bytes receiving the
//   per-pixel class index.
// * `det_out`/`det_capacity`: buffer for NMS-filtered detections; at most
//   `det_capacity` entries are written and `det_count` receives the number
//   written. A capacity of `64` is enough for every practical scene.
//
// # Safety
// `rgb` must hold `height*width*3` bytes; buffers must match the sizes
// described above; the handle must be live.
enum MtlStatus mtl_model_infer(const struct MtlModel *model,
                               const uint8_t *rgb,
                               uint32_t height,
                               uint32_t width,
                               float score_thresh,
                               float nms_iou,
                               uint8_t *seg_out,
                               struct MtlDetection *det_out,
                               uint32_t det_capacity,
                               uint32_t *det_count);

// Builds a rectifier for `height x width` images from polynomial radial
// coefficients `k[4]`, principal point (`cx`, `cy`) and focal length in
// pixels. Fails when the polynomial is not strictly increasing on
// `[0, max_valid_radius]`.
//
// # Safety
// `k` must point to 4 doubles; `out` must be valid.
enum MtlStatus mtl_rectifier_new(const double *k,
                                 double cx,
                                 double cy,
                                 double focal,
                                 double max_valid_radius,
                                 uint32_t height,
                                 uint32_t width,
                                 struct MtlRectifier **out);

// # Safety
// `rect` must come from `mtl_rectifier_new`; NULL is a no-op.
void mtl_rectifier_free(struct MtlRectifier *rect);

// Rectifies an interleaved 8-bit RGB image in place of the distortion:
// `rgb_out` receives `height*width*3` bytes; `valid_out` (optional, may
// be NULL) receives `height*width` validity flags (0/1).
//
// # Safety
// Buffers must match the rectifier's size; the handle must be live.
enum MtlStatus mtl_rectifier_apply(const struct MtlRectifier *rect,
                                   const uint8_t *rgb_in,
                                   uint8_t *rgb_out,
                                   uint8_t *valid_out);

// Forward distortion of one normalized point.
//
// # Safety
// `rect` must be live; `out_x`/`out_y` must be valid pointers.
enum MtlStatus mtl_distort_point(const struct MtlRectifier *rect,
                                 double x,
                                 double y,
                                 double *out_x,
                                 double *out_y);

// Inverse distortion of one normalized point (damped Newton iteration).
//
// # Safety
// `rect` must be live; `out_x`/`out_y` must be valid pointers.
enum MtlStatus mtl_undistort_point(const struct MtlRectifier *rect,
                                   double x,
                                   double y,
                                   double *out_x,
                                   double *out_y);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTLNET_H */
