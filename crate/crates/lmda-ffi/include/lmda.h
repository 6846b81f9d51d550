/* C interface to the lmda EEG decoding library. */

#ifndef LMDA_H
#define LMDA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit-code taxonomy.
 */
typedef enum LmdaStatus {
  LMDA_STATUS_OK = 0,
  LMDA_STATUS_USAGE_ERROR = 1,
  LMDA_STATUS_DATA_ERROR = 2,
  LMDA_STATUS_NUMERIC_ERROR = 3,
  LMDA_STATUS_NULL_ARGUMENT = 4,
} LmdaStatus;

/**
 * Opaque dataset handle.
 */
typedef struct LmdaDataset LmdaDataset;

/**
 * Opaque model handle.
 */
typedef struct LmdaModelHandle LmdaModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message for this thread into `buf` (always
 * NUL-terminated when `len > 0`) and returns the full message length in
 * bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null with `len == 0`.
 */
uintptr_t lmda_last_error(char *buf, uintptr_t len);

/**
 * Loads a dataset container. Returns null on failure; see
 * [`lmda_last_error`].
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
struct LmdaDataset *lmda_dataset_load(const char *path);

/**
 * Synthesizes a two-class oscillatory (ERD-style) dataset. Returns null
 * on failure.
 */
struct LmdaDataset *lmda_dataset_synth_erd(uintptr_t n_per_class,
                                           uintptr_t channels,
                                           uintptr_t samples,
                                           double fs_hz,
                                           uint64_t seed);

/**
 * Synthesizes a two-class deflection (ERP-style) dataset. Returns null
 * on failure.
 */
struct LmdaDataset *lmda_dataset_synth_erp(uintptr_t n_per_class,
                                           uintptr_t channels,
                                           uintptr_t samples,
                                           double fs_hz,
                                           uint64_t seed);

/**
 * Writes a dataset container atomically.
 *
 * # Safety
 * `ds` must be a live dataset handle and `path` NUL-terminated.
 */
enum LmdaStatus lmda_dataset_save(const struct LmdaDataset *ds, const char *path);

/**
 * Sampling rate in Hz, or a negative value for a null handle.
 *
 * # Safety
 * `ds` must be a live dataset handle or null.
 */
double lmda_dataset_fs_hz(const struct LmdaDataset *ds);

/**
 * # Safety
 * `ds` must come from this library and not be freed twice.
 */
void lmda_dataset_free(struct LmdaDataset *ds);

/**
 * Loads a model checkpoint. Returns null on failure.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
struct LmdaModelHandle *lmda_model_load(const char *path);

/**
 * Trains a fresh model on `train`, evaluating each epoch on `test`, and
 * returns the trained handle. Attention modules can be ablated with the
 * boolean flags. Returns null on failure.
 *
 * # Safety
 * `train` and `test` must be live dataset handles.
 */
struct LmdaModelHandle *lmda_model_train(const struct LmdaDataset *train,
                                         const struct LmdaDataset *test,
                                         uintptr_t epochs,
                                         uintptr_t batch,
                                         double lr,
                                         uint64_t seed,
                                         int use_channel_attn,
                                         int use_depth_attn);

/**
 * Writes a model checkpoint atomically.
 *
 * # Safety
 * `model` must be a live model handle and `path` NUL-terminated.
 */
enum LmdaStatus lmda_model_save(const struct LmdaModelHandle *model, const char *path);

/**
 * Trainable parameter count, or a negative value for a null handle.
 *
 * # Safety
 * `model` must be a live model handle or null.
 */
int64_t lmda_model_param_count(const struct LmdaModelHandle *model);

/**
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void lmda_model_free(struct LmdaModelHandle *model);

/**
 * Evaluates `model` on `ds`, writing accuracy and Cohen's kappa through
 * the out-pointers. `auc_out` receives the two-class AUC or NaN when it
 * does not apply.
 *
 * # Safety
 * Handles must be live; out-pointers must be writable or null.
 */
enum LmdaStatus lmda_evaluate(struct LmdaModelHandle *model,
                              const struct LmdaDataset *ds,
                              double *acc_out,
                              double *kappa_out,
                              double *auc_out);

/**
 * Writes per-trial class probabilities into `out`, which must hold
 * `n_trials * n_classes` doubles (trial-major).
 *
 * # Safety
 * Handles must be live; `out` must point to `out_len` writable doubles.
 */
enum LmdaStatus lmda_predict_proba(struct LmdaModelHandle *model,
                                   const struct LmdaDataset *ds,
                                   double *out,
                                   uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LMDA_H */
