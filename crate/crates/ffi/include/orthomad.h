/* C interface to the orthomad morphing attack detection toolkit. */

#ifndef ORTHOMAD_H
#define ORTHOMAD_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum OmadStatus {
  /**
   * Success.
   */
  OMAD_STATUS_OK = 0,
  /**
   * Invalid arguments or configuration; nothing was written.
   */
  OMAD_STATUS_USAGE = 1,
  /**
   * Runtime failure (I/O, corrupt file, numeric divergence).
   */
  OMAD_STATUS_RUNTIME = 2,
  /**
   * A required pointer argument was NULL or not valid UTF-8.
   */
  OMAD_STATUS_NULL_ARG = 3,
} OmadStatus;

/**
 * Loaded model; opaque to C.
 */
typedef struct OmadModel OmadModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent non-OK status on this thread. The pointer is
 * valid until the next failing call on the same thread; never free it.
 */
const char *omad_last_error(void);

/**
 * Generate a deterministic synthetic morph dataset under `out_dir`.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated path string.
 */
enum OmadStatus omad_generate_dataset(const char *out_dir,
                                      uint64_t seed,
                                      uint32_t identities,
                                      uint32_t per_identity,
                                      uint32_t morphs,
                                      double split_fraction,
                                      uintptr_t image_size,
                                      double noise_std);

/**
 * Train on a generated dataset; writes checkpoints and the training log
 * under `out_dir`. `optimizer` is "adam" or "sgd".
 *
 * # Safety
 * `data_dir`, `out_dir`, and `optimizer` must be NUL-terminated strings.
 */
enum OmadStatus omad_train(const char *data_dir,
                           const char *out_dir,
                           double alpha,
                           double learning_rate,
                           uintptr_t batch_size,
                           uintptr_t epochs,
                           uint64_t seed,
                           uintptr_t embed_dim,
                           const char *optimizer);

/**
 * Load a model checkpoint into a handle stored at `out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OmadStatus omad_model_load(const char *path, struct OmadModel **out);

/**
 * Release a handle from [`omad_model_load`]. NULL is a no-op.
 *
 * # Safety
 * `model` must be NULL or a pointer returned by [`omad_model_load`] that
 * has not been freed yet.
 */
void omad_model_free(struct OmadModel *model);

/**
 * Side length of the square input the model expects.
 *
 * # Safety
 * `model` must be a live handle from [`omad_model_load`].
 */
uintptr_t omad_model_input_size(const struct OmadModel *model);

/**
 * Score one square grayscale image (row-major, values in [0,1]); images of
 * a different size than the model input are bilinearly resized. The bona
 * fide score in (0,1) is written to `score_out`.
 *
 * # Safety
 * `model` must be a live handle, `pixels` must point to `size*size`
 * floats, and `score_out` must be a valid pointer.
 */
enum OmadStatus omad_model_predict(const struct OmadModel *model,
                                   const float *pixels,
                                   uintptr_t size,
                                   double *score_out);

/**
 * Equal error rate of a scored set (labels: 1 bona fide, 0 attack; higher
 * score = more bona fide). The rate and its threshold are written to the
 * output pointers.
 *
 * # Safety
 * `scores` and `labels` must point to `count` elements each; the output
 * pointers must be valid.
 */
enum OmadStatus omad_eer(const double *scores,
                         const uint8_t *labels,
                         uintptr_t count,
                         double *eer_out,
                         double *threshold_out);

/**
 * Lowest BPCER attainable with APCER ≤ `target` (target in (0,1)).
 *
 * # Safety
 * Same contracts as [`omad_eer`].
 */
enum OmadStatus omad_bpcer_at_apcer(const double *scores,
                                    const uint8_t *labels,
                                    uintptr_t count,
                                    double target,
                                    double *bpcer_out,
                                    double *threshold_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* ORTHOMAD_H */
