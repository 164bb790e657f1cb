#ifndef NPX_H
#define NPX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Pixels per frame (16×16, row-major).
 */
#define NPX_FRAME_LEN 256

/**
 * Joint coordinates per observation.
 */
#define NPX_JOINTS 2

typedef enum NpxStatus {
  NPX_STATUS_OK = 0,
  NPX_STATUS_NULL_POINTER = 1,
  NPX_STATUS_INVALID_ARGUMENT = 2,
  NPX_STATUS_IO = 3,
  NPX_STATUS_MALFORMED = 4,
  NPX_STATUS_VERSION = 5,
  NPX_STATUS_DIMENSION = 6,
  NPX_STATUS_DOMAIN = 7,
  NPX_STATUS_CONTRACT = 8,
  NPX_STATUS_PANIC = 9,
} NpxStatus;

typedef enum NpxTimeMode {
  NPX_TIME_MODE_CHANNEL = 0,
  NPX_TIME_MODE_PTE = 1,
} NpxTimeMode;

/**
 * Opaque list of trajectories.
 */
typedef struct NpxDataset NpxDataset;

/**
 * Opaque trained or freshly initialized model.
 */
typedef struct NpxModel NpxModel;

/**
 * Per-modality evaluation metrics.
 */
typedef struct NpxMetrics {
  double image_nll;
  double image_mse;
  double image_coverage;
  double joint_nll;
  double joint_mse;
  double joint_coverage;
} NpxMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *npx_last_error_message(void);

enum NpxStatus npx_dataset_load(const char *path, struct NpxDataset **out);

/**
 * Generates `count` trajectories of length `t` from seeds `seed..seed+count`.
 */
enum NpxStatus npx_dataset_generate(size_t count, size_t t, uint64_t seed, struct NpxDataset **out);

enum NpxStatus npx_dataset_save(const struct NpxDataset *ds, const char *path);

/**
 * Number of trajectories; 0 for a null handle.
 */
size_t npx_dataset_len(const struct NpxDataset *ds);

/**
 * Length T of trajectory `index`.
 */
enum NpxStatus npx_dataset_sequence_length(const struct NpxDataset *ds,
                                           size_t index,
                                           size_t *out_t);

void npx_dataset_free(struct NpxDataset *ds);

/**
 * A freshly initialized model with default widths.
 */
enum NpxStatus npx_model_new(enum NpxTimeMode mode, uint64_t seed, struct NpxModel **out);

enum NpxStatus npx_model_load(const char *path, struct NpxModel **out);

enum NpxStatus npx_model_save(const struct NpxModel *model, const char *path);

enum NpxStatus npx_model_time_mode(const struct NpxModel *model, enum NpxTimeMode *out);

/**
 * Predicts `n_targets` times from the observations `context[0..n_ctx]` of
 * trajectory `seq`. Image buffers hold `n_targets * NPX_FRAME_LEN` values
 * and joint buffers `n_targets * NPX_JOINTS`, row per target.
 */
enum NpxStatus npx_model_predict(const struct NpxModel *model,
                                 const struct NpxDataset *ds,
                                 size_t seq,
                                 const size_t *context,
                                 size_t n_ctx,
                                 const double *targets,
                                 size_t n_targets,
                                 double *image_mean,
                                 double *image_var,
                                 double *joint_mean,
                                 double *joint_var);

/**
 * Scores the model on every trajectory from `n_ctx` evenly spaced
 * observations.
 */
enum NpxStatus npx_model_evaluate(const struct NpxModel *model,
                                  const struct NpxDataset *ds,
                                  size_t n_ctx,
                                  struct NpxMetrics *out);

void npx_model_free(struct NpxModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NPX_H */
