#ifndef MOASE_H
#define MOASE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MoaseStatus {
  MOASE_STATUS_OK = 0,
  MOASE_STATUS_NULL_POINTER = 1,
  MOASE_STATUS_INVALID_ARGUMENT = 2,
  MOASE_STATUS_CONFIG = 3,
  MOASE_STATUS_SHAPE = 4,
  MOASE_STATUS_NUMERIC = 5,
  MOASE_STATUS_CHECKPOINT = 6,
  MOASE_STATUS_IO = 7,
  MOASE_STATUS_PANIC = 8,
} MoaseStatus;

/**
 * A source model together with the run configuration it was built for.
 */
typedef struct MoaseModel MoaseModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Pretrains a source model. `config_json` may be null for defaults.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string. `out` must be a
 * valid pointer; on success it receives a handle to free with
 * [`moase_model_free`].
 */
enum MoaseStatus moase_model_pretrain(const char *config_json, struct MoaseModel **out);

/**
 * Loads a checkpoint. The model section of `config_json` (null for
 * defaults) must match the checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `config_json` null or one, and
 * `out` a valid pointer.
 */
enum MoaseStatus moase_model_load(const char *path,
                                  const char *config_json,
                                  struct MoaseModel **out);

/**
 * Writes the source parameters as a text checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MoaseStatus moase_model_save(const struct MoaseModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void moase_model_free(struct MoaseModel *model);

/**
 * Reports the input width, class count and clean validation accuracy.
 * Any output pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum MoaseStatus moase_model_info(const struct MoaseModel *model,
                                  size_t *input_dim,
                                  size_t *classes,
                                  double *source_accuracy);

/**
 * Evaluates the source model on a row-major `[batch, input_dim]` block and
 * writes `batch * classes` logits.
 *
 * # Safety
 * `x` must point to `batch * input_dim` doubles and `logits` to
 * `logits_len` writable doubles.
 */
enum MoaseStatus moase_model_forward(const struct MoaseModel *model,
                                     const double *x,
                                     size_t batch,
                                     size_t input_dim,
                                     double *logits,
                                     size_t logits_len);

/**
 * Runs one adaptation episode from the source model and returns its metrics
 * as a JSON document. `mode` overrides the configured mode when non-null.
 *
 * # Safety
 * `model` must be a live handle, `mode` null or a NUL-terminated string and
 * `json_out` a valid pointer. Free the returned string with
 * [`moase_string_free`].
 */
enum MoaseStatus moase_run_episode(const struct MoaseModel *model,
                                   const char *mode,
                                   char **json_out);

/**
 * Jensen-Shannon divergence in nats between two histograms of `bins`
 * counts.
 *
 * # Safety
 * `p` and `q` must point to `bins` doubles and `out` must be writable.
 */
enum MoaseStatus moase_js_divergence(const double *p, const double *q, size_t bins, double *out);

/**
 * Message for the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *moase_last_error(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void moase_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *moase_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOASE_H */
