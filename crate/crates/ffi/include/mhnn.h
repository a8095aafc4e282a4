#ifndef MHNN_H
#define MHNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum MhnnStatus {
  MHNN_STATUS_OK = 0,
  MHNN_STATUS_NULL_POINTER = 1,
  MHNN_STATUS_INVALID_ARGUMENT = 2,
  MHNN_STATUS_SHAPE_MISMATCH = 3,
  MHNN_STATUS_IO = 4,
  MHNN_STATUS_FORMAT = 5,
  MHNN_STATUS_RUNTIME = 6,
  MHNN_STATUS_BUFFER_TOO_SMALL = 7,
  MHNN_STATUS_PANIC = 8,
} MhnnStatus;

// A labeled window set.
typedef struct MhnnDataset MhnnDataset;

// A trained model plus the normalization statistics stored with it.
typedef struct MhnnModel MhnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mhnn_version(void);

// Message of the last failed call on this thread, empty after a success.
// The pointer stays valid until the next call on this thread.
const char *mhnn_last_error(void);

// Loads an `MHWS` window-set file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MhnnStatus mhnn_dataset_load(const char *path, struct MhnnDataset **out);

// Generates the synthetic sinusoid window set.
//
// # Safety
// `out` must be a writable pointer.
enum MhnnStatus mhnn_dataset_synth(size_t n_per_class,
                                   size_t channels,
                                   size_t length,
                                   size_t classes,
                                   uint64_t seed,
                                   struct MhnnDataset **out);

// Builds a dataset from `n × channels × length` samples and `n` labels.
// Channels and classes get generic names.
//
// # Safety
// `windows` must hold `n · channels · length` floats, `labels` `n` values and
// `out` must be writable.
enum MhnnStatus mhnn_dataset_from_buffers(const float *windows,
                                          const uint32_t *labels,
                                          size_t n,
                                          size_t channels,
                                          size_t length,
                                          size_t classes,
                                          double sample_rate_hz,
                                          struct MhnnDataset **out);

// Writes a dataset in the `MHWS` format.
//
// # Safety
// `dataset` must be a live handle and `path` a NUL-terminated string.
enum MhnnStatus mhnn_dataset_save(const struct MhnnDataset *dataset, const char *path);

// Window count, channels, window length and class count. Null outputs are skipped.
//
// # Safety
// `dataset` must be a live handle; non-null outputs must be writable.
enum MhnnStatus mhnn_dataset_shape(const struct MhnnDataset *dataset,
                                   size_t *n,
                                   size_t *channels,
                                   size_t *length,
                                   size_t *classes);

// Copies the `n × channels × length` samples into `out`.
//
// # Safety
// `dataset` must be a live handle and `out` must hold `out_len` floats.
enum MhnnStatus mhnn_dataset_windows(const struct MhnnDataset *dataset, float *out, size_t out_len);

// Copies the labels into `out`.
//
// # Safety
// `dataset` must be a live handle and `out` must hold `out_len` values.
enum MhnnStatus mhnn_dataset_labels(const struct MhnnDataset *dataset,
                                    uint32_t *out,
                                    size_t out_len);

// Releases a dataset. Null is ignored.
//
// # Safety
// `dataset` must be null or a handle not yet freed.
void mhnn_dataset_free(struct MhnnDataset *dataset);

// Loads a checkpoint written by `mhnn train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MhnnStatus mhnn_model_load(const char *path, struct MhnnModel **out);

// Input channels, window length and class count. Null outputs are skipped.
//
// # Safety
// `model` must be a live handle; non-null outputs must be writable.
enum MhnnStatus mhnn_model_shape(const struct MhnnModel *model,
                                 size_t *channels,
                                 size_t *length,
                                 size_t *classes);

// Class probabilities for `n` raw windows of `channels × length` samples,
// normalized with the statistics stored in the checkpoint. Writes `n × classes`
// values to `out`.
//
// # Safety
// `model` must be a live handle, `windows` must hold `n · channels · length`
// floats and `out` must hold `out_len` floats.
enum MhnnStatus mhnn_model_predict_proba(struct MhnnModel *model,
                                         const float *windows,
                                         size_t n,
                                         float *out,
                                         size_t out_len);

// Predicted class of each of `n` raw windows.
//
// # Safety
// As for [`mhnn_model_predict_proba`]; `labels` must hold `labels_len` values.
enum MhnnStatus mhnn_model_predict(struct MhnnModel *model,
                                   const float *windows,
                                   size_t n,
                                   uint32_t *labels,
                                   size_t labels_len);

// Accuracy and macro F1 of the model on a raw dataset. Null outputs are skipped.
//
// # Safety
// `model` and `dataset` must be live handles; non-null outputs must be writable.
enum MhnnStatus mhnn_model_evaluate(struct MhnnModel *model,
                                    const struct MhnnDataset *dataset,
                                    double *accuracy,
                                    double *macro_f1);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void mhnn_model_free(struct MhnnModel *model);

// Lengths of the `levels` detail components (finest first) followed by the
// approximation length, written to `lengths[0..=levels]`.
//
// # Safety
// `lengths` must hold `lengths_len` values.
enum MhnnStatus mhnn_mdwd_lengths(size_t length,
                                  size_t levels,
                                  size_t *lengths,
                                  size_t lengths_len);

// Haar decomposition of a `channels × length` signal. `out` receives the
// detail components of levels 1..=levels and then the final approximation,
// each `channels × len` row-major, back to back.
//
// # Safety
// `signal` must hold `channels · length` values and `out` `out_len` values.
enum MhnnStatus mhnn_mdwd(const double *signal,
                          size_t channels,
                          size_t length,
                          size_t levels,
                          double *out,
                          size_t out_len);

// Inverse of [`mhnn_mdwd`]: rebuilds the `channels × length` signal from
// components laid out as `mhnn_mdwd` writes them.
//
// # Safety
// `components` must hold the `channels · Σ len` values and `out` `out_len` values.
enum MhnnStatus mhnn_reconstruct(const double *components,
                                 size_t channels,
                                 size_t length,
                                 size_t levels,
                                 double *out,
                                 size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MHNN_H */
