#ifndef VIDCOUNT_H
#define VIDCOUNT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VcStatus {
  VC_STATUS_OK = 0,
  VC_STATUS_NULL_POINTER = 1,
  VC_STATUS_INVALID_ARGUMENT = 2,
  VC_STATUS_IO = 3,
  VC_STATUS_FORMAT = 4,
  VC_STATUS_SHAPE = 5,
  VC_STATUS_CONFIG = 6,
  VC_STATUS_ANNOTATION = 7,
  VC_STATUS_CHECKPOINT = 8,
  VC_STATUS_BACKEND = 9,
  VC_STATUS_NON_FINITE = 10,
  VC_STATUS_PANIC = 11,
} VcStatus;

typedef enum VcKernel {
  VC_KERNEL_FIXED = 0,
  VC_KERNEL_ADAPTIVE = 1,
} VcKernel;

// Clip annotation loaded from JSON.
typedef struct VcAnnotation VcAnnotation;

// Density map; its sum is the predicted or ground-truth count.
typedef struct VcDensityMap VcDensityMap;

// Trained model restored from a checkpoint.
typedef struct VcModel VcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// Valid until the next call into the library from the same thread.
const char *vc_last_error(void);

// Library version as a static NUL-terminated string.
const char *vc_version(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum VcStatus vc_annotation_load(const char *path, struct VcAnnotation **out);

// # Safety
// `ann` must come from [`vc_annotation_load`]; `out` must be writable.
enum VcStatus vc_annotation_frame_count(const struct VcAnnotation *ann, size_t *out);

// Number of annotated heads in frame `index`.
//
// # Safety
// `ann` must come from [`vc_annotation_load`]; `out` must be writable.
enum VcStatus vc_annotation_head_count(const struct VcAnnotation *ann, size_t index, size_t *out);

// # Safety
// `ann` must be null or a handle not yet freed.
void vc_annotation_free(struct VcAnnotation *ann);

// Renders the ground-truth density of frame `index`. `sigma` is used by
// the fixed kernel; `beta` and `k` by the adaptive one.
//
// # Safety
// `ann` must come from [`vc_annotation_load`]; `out` must be writable.
enum VcStatus vc_density_render(const struct VcAnnotation *ann,
                                size_t index,
                                enum VcKernel kernel,
                                double sigma,
                                double beta,
                                size_t k,
                                struct VcDensityMap **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum VcStatus vc_density_load(const char *path, struct VcDensityMap **out);

// # Safety
// `map` must be a live handle and `path` a NUL-terminated string.
enum VcStatus vc_density_save(const struct VcDensityMap *map, const char *path);

// # Safety
// `map` must be a live handle; `width` and `height` must be writable.
enum VcStatus vc_density_dims(const struct VcDensityMap *map, size_t *width, size_t *height);

// Count, i.e. the sum over the map.
//
// # Safety
// `map` must be a live handle; `out` must be writable.
enum VcStatus vc_density_count(const struct VcDensityMap *map, double *out);

// Copies the row-major values into `buf`, which must hold exactly
// `width * height` doubles.
//
// # Safety
// `map` must be a live handle and `buf` valid for `len` writes.
enum VcStatus vc_density_copy(const struct VcDensityMap *map, double *buf, size_t len);

// # Safety
// `map` must be null or a handle not yet freed.
void vc_density_free(struct VcDensityMap *map);

// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum VcStatus vc_model_load(const char *path, struct VcModel **out);

// Number of consecutive frames one prediction consumes.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum VcStatus vc_model_window(const struct VcModel *model, size_t *out);

// Predicts the density of the last of `n_frames` PNG frames. `flow_path`
// names a FLO2 file for the last frame pair; when null, flow is estimated
// by block matching.
//
// # Safety
// `frame_paths` must point to `n_frames` NUL-terminated strings;
// `flow_path` must be null or NUL-terminated; `out` must be writable.
enum VcStatus vc_model_infer(const struct VcModel *model,
                             const char *const *frame_paths,
                             size_t n_frames,
                             const char *flow_path,
                             struct VcDensityMap **out);

// # Safety
// `model` must be null or a handle not yet freed.
void vc_model_free(struct VcModel *model);

// MAE and root-mean-square error over `n` (predicted, true) count pairs.
//
// # Safety
// `pred` and `truth` must be valid for `n` reads; `mae` and `mse` writable.
enum VcStatus vc_evaluate(const double *pred,
                          const double *truth,
                          size_t n,
                          double *mae,
                          double *mse);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIDCOUNT_H */
