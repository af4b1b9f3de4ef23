/* C interface for the pose one-step distillation library. */

#ifndef POSE_H
#define POSE_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every FFI entry point.
 */
typedef enum PoseStatus {
  POSE_STATUS_OK = 0,
  POSE_STATUS_NULL_POINTER = 1,
  POSE_STATUS_INVALID_ARGUMENT = 2,
  POSE_STATUS_MISSING = 3,
  POSE_STATUS_TRAINING = 4,
  POSE_STATUS_EVALUATION = 5,
  POSE_STATUS_INTERNAL = 6,
} PoseStatus;

/**
 * An opaque loaded generator: architecture plus parameters.
 */
typedef struct PoseModel PoseModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pose_version(void);

/**
 * Message for the most recent failure on this thread. Valid until the next
 * failing call from the same thread.
 */
const char *pose_last_error(void);

/**
 * Load a checkpoint from its path stem (without the `.bin`/`.json`
 * extension). On success writes a handle that must be released with
 * [`pose_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum PoseStatus pose_model_load(const char *path, struct PoseModel **out);

/**
 * Release a model handle. Passing NULL is a no-op.
 *
 * # Safety
 * `model` must be a handle from [`pose_model_load`], released at most once.
 */
void pose_model_free(struct PoseModel *model);

/**
 * Number of scalar parameters in the loaded model.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum PoseStatus pose_model_num_params(const struct PoseModel *model, uintptr_t *out);

/**
 * Sample clips by Euler integration from `t=1` noise.
 *
 * `noise` and `out` hold `batch*frames*channels*height*width` doubles in
 * row-major order; `cond_frames` is either NULL (unconditional) or
 * `batch*channels*height*width` doubles giving the conditional first frame.
 *
 * # Safety
 * All non-null pointers must reference buffers of the stated sizes.
 */
enum PoseStatus pose_model_sample(const struct PoseModel *model,
                                  const double *noise,
                                  uintptr_t batch,
                                  uintptr_t frames,
                                  uintptr_t channels,
                                  uintptr_t height,
                                  uintptr_t width,
                                  uintptr_t steps,
                                  const double *cond_frames,
                                  double *out);

/**
 * Sliced Wasserstein-1 distance between two point sets of `dim` columns.
 *
 * # Safety
 * `a` holds `n_a*dim` doubles, `b` holds `n_b*dim`; `out` must be valid.
 */
enum PoseStatus pose_sliced_wasserstein(const double *a,
                                        uintptr_t n_a,
                                        const double *b,
                                        uintptr_t n_b,
                                        uintptr_t dim,
                                        uintptr_t n_projections,
                                        uint64_t seed,
                                        double *out);

/**
 * Biased RBF-kernel MMD between two point sets of `dim` columns.
 *
 * # Safety
 * Same buffer contract as [`pose_sliced_wasserstein`].
 */
enum PoseStatus pose_mmd_rbf(const double *a,
                             uintptr_t n_a,
                             const double *b,
                             uintptr_t n_b,
                             uintptr_t dim,
                             double *out);

/**
 * Temporal metrics of a clip batch: motion smoothness, subject consistency
 * and dynamic degree.
 *
 * # Safety
 * `videos` holds `batch*frames*channels*height*width` doubles; the three
 * output pointers must be valid.
 */
enum PoseStatus pose_temporal_metrics(const double *videos,
                                      uintptr_t batch,
                                      uintptr_t frames,
                                      uintptr_t channels,
                                      uintptr_t height,
                                      uintptr_t width,
                                      double *out_smoothness,
                                      double *out_consistency,
                                      double *out_dynamic);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSE_H */
