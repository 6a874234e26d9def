#ifndef EVHEAT_H
#define EVHEAT_H

/* Generated by cbindgen from evheat-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible entry point.
typedef enum EvheatStatus {
  EVHEAT_OK = 0,
  // A required pointer argument was null.
  EVHEAT_ERR_NULL_ARG = 1,
  // A string argument was not valid UTF-8.
  EVHEAT_ERR_UTF8 = 2,
  // Invalid configuration or argument values.
  EVHEAT_ERR_CONFIG = 3,
  // Tensor shape mismatch.
  EVHEAT_ERR_SHAPES = 4,
  // A numeric validation failed (degenerate box, non-Hermitian spectrum...).
  EVHEAT_ERR_VALIDATION = 5,
  // Checkpoint file malformed or incompatible with the architecture.
  EVHEAT_ERR_CHECKPOINT = 6,
  // A non-finite value was produced.
  EVHEAT_ERR_NON_FINITE = 7,
  // Filesystem or serialization failure.
  EVHEAT_ERR_IO = 8,
  // An output buffer was too small.
  EVHEAT_ERR_BUFFER = 9,
  // Internal panic caught at the ABI boundary.
  EVHEAT_ERR_PANIC = 10,
} EvheatStatus;

// A trained detector plus the run configuration it was saved with.
typedef struct EvheatDetector EvheatDetector;

// One decoded detection in input-resolution pixel coordinates.
typedef struct EvheatDetection {
  double x1;
  double y1;
  double x2;
  double y2;
  // Classification confidence in (0, 1).
  double score;
  // Class index.
  uint32_t cls;
} EvheatDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *evheat_version(void);

// Copies the calling thread's last error message (NUL-terminated, possibly
// truncated) into `buf`. Returns the untruncated length, excluding the NUL.
//
// # Safety
// `buf` must point to `cap` writable bytes, or be null (query mode).
size_t evheat_last_error(char *buf, size_t cap);

// Orthonormal 2D DCT-II of a row-major `h x w` field into `out` (same size).
//
// # Safety
// `input` and `out` must each point to `h * w` doubles.
enum EvheatStatus evheat_dct2(const double *input, size_t h, size_t w, double *out);

// Inverse of [`evheat_dct2`].
//
// # Safety
// `input` and `out` must each point to `h * w` doubles.
enum EvheatStatus evheat_idct2(const double *input, size_t h, size_t w, double *out);

// Applies the heat conduction operator: transform with the chosen expert
// (0 = DCT, 1 = DFT, 2 = Haar), attenuate each coefficient by
// `exp(-k * lambda * t)` with the per-frequency diffusivity map `k_map`
// (row-major `h x w`, nonnegative), and transform back.
//
// # Safety
// `u0`, `k_map` and `out` must each point to `h * w` doubles.
enum EvheatStatus evheat_hco_apply(const double *u0,
                                   size_t h,
                                   size_t w,
                                   uint32_t expert,
                                   const double *k_map,
                                   double t,
                                   double *out);

// Loads a detector from a checkpoint written by the trainer; the checkpoint
// embeds the architecture. On success `*out` owns the handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EvheatStatus evheat_detector_load(const char *path, struct EvheatDetector **out);

// Frees a detector handle. Null is a no-op.
//
// # Safety
// `det` must be a handle from [`evheat_detector_load`], freed at most once.
void evheat_detector_free(struct EvheatDetector *det);

// Reports the stacked-frame tensor layout the detector consumes:
// `channels x height x width`, row-major.
//
// # Safety
// All pointers must be valid; `det` must be a live handle.
enum EvheatStatus evheat_detector_input_shape(const struct EvheatDetector *det,
                                              size_t *channels,
                                              size_t *height,
                                              size_t *width);

// Runs detection on one stacked event frame (`channels x height x width`
// doubles, layout per [`evheat_detector_input_shape`]). Selects the
// checkpoint's configured top-K queries, then writes at most `cap`
// detections to `out_dets` and the count to `out_count`.
//
// # Safety
// `frame` must point to `frame_len` doubles; `out_dets` to `cap` entries.
enum EvheatStatus evheat_detector_detect(struct EvheatDetector *det,
                                         const double *frame,
                                         size_t frame_len,
                                         struct EvheatDetection *out_dets,
                                         size_t cap,
                                         size_t *out_count);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* EVHEAT_H */
