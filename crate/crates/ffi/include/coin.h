/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef COIN_H
#define COIN_H

#include <stddef.h>
#include <stdint.h>

typedef enum CoinStatus {
  COIN_STATUS_OK = 0,
  // A required pointer argument was NULL.
  COIN_STATUS_NULL_POINTER = 1,
  // Bad shapes, out-of-range parameters, malformed specs or checkpoints.
  COIN_STATUS_INVALID_ARGUMENT = 2,
  // Non-finite values or a zero-norm embedding.
  COIN_STATUS_NUMERIC = 3,
  // The input does not admit the requested quantity (e.g. S_Dbw of one class).
  COIN_STATUS_DEGENERATE = 4,
  COIN_STATUS_IO = 5,
  COIN_STATUS_PANIC = 6,
} CoinStatus;

// Which representation [`coin_model_features`] returns.
typedef enum CoinLayer {
  // Encoder output.
  COIN_LAYER_Z = 0,
  // Unit-norm projection.
  COIN_LAYER_V = 1,
} CoinLayer;

// Labelled feature matrix.
typedef struct CoinDataset CoinDataset;

// Trained parameters together with their architecture.
typedef struct CoinModel CoinModel;

typedef struct CoinSDbw {
  double scat;
  double dens_bw;
  double score;
} CoinSDbw;

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *coin_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *coin_version(void);

// Gaussian blobs drawn from `ChaCha8(seed)`; rows are grouped by class.
//
// # Safety
// `out` must be valid for one pointer write.
enum CoinStatus coin_dataset_make_blobs(size_t classes,
                                        size_t dims,
                                        size_t per_class,
                                        double center_scale,
                                        double spread,
                                        uint64_t seed,
                                        struct CoinDataset **out);

// # Safety
// `ds` must be NULL or a handle from this library that was not freed yet.
void coin_dataset_free(struct CoinDataset *ds);

// Number of rows, columns and classes.
//
// # Safety
// `ds` must be a live handle; each out pointer must be NULL or writable.
enum CoinStatus coin_dataset_shape(const struct CoinDataset *ds,
                                   size_t *rows,
                                   size_t *cols,
                                   size_t *classes);

// Copies the row-major features into `out` (`out_len >= rows * cols`).
//
// # Safety
// `ds` must be a live handle and `out` valid for `out_len` writes.
enum CoinStatus coin_dataset_features(const struct CoinDataset *ds, double *out, size_t out_len);

// Copies the labels into `out` (`out_len >= rows`).
//
// # Safety
// `ds` must be a live handle and `out` valid for `out_len` writes.
enum CoinStatus coin_dataset_labels(const struct CoinDataset *ds, size_t *out, size_t out_len);

// Loads a checkpoint written by `coin` or [`coin_model_save`].
//
// # Safety
// `path` must be a NUL-terminated string; `out` valid for one write.
enum CoinStatus coin_model_load(const char *path, struct CoinModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum CoinStatus coin_model_save(const struct CoinModel *model, const char *path);

// # Safety
// `model` must be NULL or a handle from this library that was not freed yet.
void coin_model_free(struct CoinModel *model);

// Input width, encoder width, projection width and class count.
//
// # Safety
// `model` must be a live handle; each out pointer must be NULL or writable.
enum CoinStatus coin_model_dims(const struct CoinModel *model,
                                size_t *d_in,
                                size_t *d_z,
                                size_t *d_v,
                                size_t *classes);

// Features of `rows` inputs at `layer`, written row-major into `out`
// (`rows * d_z` or `rows * d_v` values).
//
// # Safety
// `x` must hold `rows * cols` doubles and `out` be valid for `out_len` writes.
enum CoinStatus coin_model_features(const struct CoinModel *model,
                                    const double *x,
                                    size_t rows,
                                    size_t cols,
                                    enum CoinLayer layer,
                                    double *out,
                                    size_t out_len);

// Class predictions (argmax of the classifier logits) for `rows` inputs.
//
// # Safety
// `x` must hold `rows * cols` doubles and `out` be valid for `rows` writes.
enum CoinStatus coin_model_predict(const struct CoinModel *model,
                                   const double *x,
                                   size_t rows,
                                   size_t cols,
                                   size_t *out);

// Supervised contrastive loss of unit-norm rows `v`. When `grad` is not
// NULL it receives `dL/dv` (`rows * cols` values).
//
// # Safety
// `v` must hold `rows * cols` doubles, `labels` `rows` entries, `value` be
// writable and `grad` NULL or valid for `rows * cols` writes.
enum CoinStatus coin_sup_con_loss(const double *v,
                                  size_t rows,
                                  size_t cols,
                                  const size_t *labels,
                                  double tau,
                                  double *value,
                                  double *grad);

// S_Dbw of `rows` feature vectors clustered by `labels`.
//
// # Safety
// `features` must hold `rows * cols` doubles, `labels` `rows` entries and
// `out` be writable.
enum CoinStatus coin_s_dbw(const double *features,
                           size_t rows,
                           size_t cols,
                           const size_t *labels,
                           struct CoinSDbw *out);

// Equivalent of `coin run --spec <spec_path> [--out <out_dir>]`. `out_dir`
// may be NULL to use the spec's own `out_dir`.
//
// # Safety
// `spec_path` must be a NUL-terminated string; `out_dir` NULL or one.
enum CoinStatus coin_run_spec(const char *spec_path, const char *out_dir);

#endif  /* COIN_H */
