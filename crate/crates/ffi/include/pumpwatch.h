/* C interface to the pumpwatch detector library. */

#ifndef PUMPWATCH_H
#define PUMPWATCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Success.
#define PW_OK 0

// Filesystem problem: missing file, permissions, short read.
#define PW_ERR_IO 1

// A file exists but does not decode: corrupt checkpoint, malformed config.
#define PW_ERR_FORMAT 2

// The caller passed something unusable: null pointer, wrong length,
// out-of-range value, artifacts that do not belong together.
#define PW_ERR_INVALID_ARG 3

// A failure that indicates a bug rather than bad input.
#define PW_ERR_INTERNAL 4

// A loaded detector: model weights plus the input normalization fitted at
// training time, both read from the checkpoint.
typedef struct PwModel PwModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or an empty string.
// The pointer stays valid until the next failing call on the same thread.
const char *pw_last_error(void);

// Load a detector from a run config and a checkpoint.
//
// `checkpoint_path` may be null, in which case the config's default
// (`<output.dir>/checkpoint.pwck`) is used. On success `*out` owns the
// handle; release it with `pw_model_free`.
//
// # Safety
// `config_path` (and `checkpoint_path` when non-null) must be valid
// NUL-terminated strings, and `out` must point to writable memory.
int32_t pw_model_load(const char *config_path, const char *checkpoint_path, struct PwModel **out);

// Release a handle returned by `pw_model_load`. Null is a no-op.
//
// # Safety
// `model` must be null or a pointer obtained from `pw_model_load` that has
// not been freed already.
void pw_model_free(struct PwModel *model);

// Number of trainable parameters in the loaded model.
//
// # Safety
// `model` must come from `pw_model_load`; `out` must be writable.
int32_t pw_model_param_count(const struct PwModel *model, uint64_t *out);

// The window length (in chunks) the detector was trained on.
//
// # Safety
// `model` must come from `pw_model_load`; `out` must be writable.
int32_t pw_model_segment_length(const struct PwModel *model, uint64_t *out);

// The decision threshold stored with the checkpoint.
//
// # Safety
// `model` must come from `pw_model_load`; `out` must be writable.
int32_t pw_model_threshold(const struct PwModel *model, double *out);

// Score one window of chunk features.
//
// `features` is row-major `rows x 15`, rows ordered oldest to newest, the
// 15 columns in feature-CSV order: Date through AvgPriceMax (everything
// except the trailing Label column). Normalization and feature masking are
// applied internally; pass raw aggregated values. `rows` should equal
// `pw_model_segment_length` — an attention detector rejects any other
// length, the convolutional one accepts longer windows. The pump
// probability lands in `*out_prob`.
//
// # Safety
// `model` must come from `pw_model_load`; `features` must point to
// `rows * 15` doubles; `out_prob` must be writable.
int32_t pw_model_predict(const struct PwModel *model,
                         const double *features,
                         uint64_t rows,
                         double *out_prob);

// Precision, recall, and F1 of probabilities against 0/1 labels at the
// given threshold (predicted positive when probability >= threshold). Any
// of the three output pointers may be null to skip that value.
//
// # Safety
// `probs` and `labels` must each point to `len` doubles; non-null outputs
// must be writable.
int32_t pw_metrics(const double *probs,
                   const double *labels,
                   uint64_t len,
                   double threshold,
                   double *out_precision,
                   double *out_recall,
                   double *out_f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PUMPWATCH_H */
