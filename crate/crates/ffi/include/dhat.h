#ifndef DHAT_H
#define DHAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum DhatStatus {
  DHAT_STATUS_OK = 0,
  DHAT_STATUS_NULL_POINTER = 1,
  DHAT_STATUS_INVALID_ARGUMENT = 2,
  DHAT_STATUS_CONFIG_ERROR = 3,
  DHAT_STATUS_CONTRACT_ERROR = 4,
  DHAT_STATUS_IO_ERROR = 5,
  DHAT_STATUS_CHECKPOINT_ERROR = 6,
  DHAT_STATUS_RUNTIME_ERROR = 7,
  DHAT_STATUS_PANIC = 8,
} DhatStatus;

typedef enum DhatLossKind {
  DHAT_LOSS_KIND_CROSS_ENTROPY = 0,
  DHAT_LOSS_KIND_CW_MARGIN = 1,
} DhatLossKind;

typedef enum DhatDirection {
  DHAT_DIRECTION_ADVERSARIAL = 0,
  DHAT_DIRECTION_INVERSE = 1,
} DhatDirection;

/**
 * Opaque classifier handle.
 */
typedef struct DhatModel DhatModel;

/**
 * ℓ∞ attack settings. Radii are in pixel units (`8/255` is `0.0313...`).
 */
typedef struct DhatAttackParams {
  double epsilon;
  double step_size;
  uint32_t iterations;
  enum DhatLossKind loss;
  enum DhatDirection direction;
  bool random_start;
  double kappa;
  uint64_t seed;
} DhatAttackParams;

typedef struct DhatLossWeights {
  double lambda1;
  double lambda2;
  double omega;
  double p_norm;
  double eps_num;
} DhatLossWeights;

typedef struct DhatLossTerms {
  double total;
  double ce;
  double dhlr;
  double floe;
} DhatLossTerms;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 */
const char *dhat_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dhat_version(void);

/**
 * Builds a freshly initialised classifier (`"small-cnn"` or `"small-resnet"`).
 *
 * # Safety
 * `arch` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DhatStatus dhat_model_build(const char *arch,
                                 size_t in_channels,
                                 size_t num_classes,
                                 uint64_t seed,
                                 struct DhatModel **out);

/**
 * Loads the model stored in a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DhatStatus dhat_model_load(const char *path, struct DhatModel **out);

/**
 * Saves the model as a checkpoint with a zero step counter.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum DhatStatus dhat_model_save(const struct DhatModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and must not be used afterwards.
 */
void dhat_model_free(struct DhatModel *model);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t dhat_model_num_classes(const struct DhatModel *model);

/**
 * Writes `(B, K)` logits into `logits_out` (length `b * K`).
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum DhatStatus dhat_model_forward(const struct DhatModel *model,
                                   const float *images,
                                   size_t b,
                                   size_t c,
                                   size_t h,
                                   size_t w,
                                   float *logits_out,
                                   size_t logits_len);

/**
 * Runs PGD (or inverse PGD, per `params.direction`) and writes the
 * perturbed images into `out` (same shape as `images`).
 *
 * # Safety
 * Buffers must hold `b*c*h*w` floats; `labels` must hold `b` entries.
 */
enum DhatStatus dhat_attack(const struct DhatModel *model,
                            const float *images,
                            const uint32_t *labels,
                            size_t b,
                            size_t c,
                            size_t h,
                            size_t w,
                            const struct DhatAttackParams *params,
                            float *out);

/**
 * Grad-CAM maps `(B, H, W)` in `[0, 1]` for the given target classes.
 *
 * # Safety
 * `images` holds `b*c*h*w` floats, `labels` `b` entries, `maps_out` `b*h*w`.
 */
enum DhatStatus dhat_grad_cam(const struct DhatModel *model,
                              const float *images,
                              const uint32_t *labels,
                              size_t b,
                              size_t c,
                              size_t h,
                              size_t w,
                              float *maps_out);

/**
 * Keeps the pixels whose attention is below `omega`, zeroing the rest.
 *
 * # Safety
 * `images`/`out` hold `b*c*h*w` floats and `maps` holds `b*h*w`.
 */
enum DhatStatus dhat_separate_background(const float *images,
                                         const float *maps,
                                         size_t b,
                                         size_t c,
                                         size_t h,
                                         size_t w,
                                         double omega,
                                         float *out);

/**
 * Evaluates the combined objective on `(B, K)` logit buffers.
 *
 * # Safety
 * Each logit buffer holds `b*k` doubles and `labels` holds `b` entries.
 */
enum DhatStatus dhat_objective_terms(const double *z_adv,
                                     const double *z_inv,
                                     const double *z_bg,
                                     const uint32_t *labels,
                                     size_t b,
                                     size_t k,
                                     const struct DhatLossWeights *weights,
                                     struct DhatLossTerms *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DHAT_H */
