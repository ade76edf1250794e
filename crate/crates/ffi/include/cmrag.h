#ifndef CMRAG_H
#define CMRAG_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Values accepted by the `mode` argument of [`cmrag_retrieve`].
 */
typedef enum CmragMode {
  CMRAG_MODE_IMAGE_ONLY = 0,
  CMRAG_MODE_TEXT_ONLY = 1,
  CMRAG_MODE_RAW_LINEAR = 2,
  CMRAG_MODE_UCMR = 3,
  CMRAG_MODE_ENSEMBLE_UCMR = 4,
} CmragMode;

typedef enum CmragStatus {
  CMRAG_STATUS_OK = 0,
  CMRAG_STATUS_NULL_POINTER = 1,
  CMRAG_STATUS_INVALID_ARGUMENT = 2,
  CMRAG_STATUS_DIM_MISMATCH = 3,
  CMRAG_STATUS_MISSING_CHANNEL = 4,
  CMRAG_STATUS_IO = 5,
  CMRAG_STATUS_FORMAT = 6,
  CMRAG_STATUS_PANIC = 7,
} CmragStatus;

/**
 * Opaque index handle.
 */
typedef struct CmragIndex CmragIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a
 * successful call. Valid until the next cmrag call on the same thread.
 */
const char *cmrag_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cmrag_version(void);

/**
 * Loads an index directory written by `cmrag ingest` or
 * [`cmrag_index_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CmragStatus cmrag_index_load(const char *path, struct CmragIndex **out);

/**
 * Builds an index from row-major `count x dim` image and text matrices and
 * `count` page ids.
 *
 * # Safety
 * `images` and `texts` must point to `count * dim` floats and `ids` to
 * `count` NUL-terminated strings; `out` must be a valid pointer.
 */
enum CmragStatus cmrag_index_from_arrays(size_t dim,
                                         size_t count,
                                         const float *images,
                                         const float *texts,
                                         const char *const *ids,
                                         bool normalize,
                                         struct CmragIndex **out);

/**
 * Writes the index directory (created if missing).
 *
 * # Safety
 * `index` must come from this library and `path` be NUL-terminated.
 */
enum CmragStatus cmrag_index_save(const struct CmragIndex *index, const char *path);

/**
 * Releases an index. NULL is ignored.
 *
 * # Safety
 * `index` must come from this library and not be used afterwards.
 */
void cmrag_index_free(struct CmragIndex *index);

/**
 * Embedding dimension, or 0 for NULL.
 *
 * # Safety
 * `index` must be NULL or come from this library.
 */
size_t cmrag_index_dim(const struct CmragIndex *index);

/**
 * Number of pages, or 0 for NULL.
 *
 * # Safety
 * `index` must be NULL or come from this library.
 */
size_t cmrag_index_count(const struct CmragIndex *index);

/**
 * Page id of row `i`, owned by the index; NULL when out of range.
 *
 * # Safety
 * `index` must be NULL or come from this library.
 */
const char *cmrag_index_page_id(const struct CmragIndex *index, size_t i);

/**
 * Ranks the index for one query and writes up to `k` row indices and fused
 * scores, best first. `*out_len` receives the number written
 * (`min(k, count)`).
 *
 * `image_query` is used for every mode except ensemble, which also needs
 * `text_query`. For the single-embedding modes `text_query` may be NULL.
 *
 * # Safety
 * Query pointers must hold `dim` floats; output buffers must hold `k`
 * entries.
 */
enum CmragStatus cmrag_retrieve(const struct CmragIndex *index,
                                const float *image_query,
                                const float *text_query,
                                size_t dim,
                                uint32_t mode,
                                double alpha,
                                double beta,
                                size_t k,
                                size_t *out_indices,
                                double *out_scores,
                                size_t *out_len);

/**
 * Elementwise logistic function. `out` may alias `values`.
 *
 * # Safety
 * Both pointers must hold `len` doubles.
 */
enum CmragStatus cmrag_sigmoid(const double *values, size_t len, double *out);

/**
 * Population z-score. A constant input yields zeros and `sigma == 0`.
 * `out_mu` and `out_sigma` may be NULL.
 *
 * # Safety
 * `values` and `out` must hold `len` doubles.
 */
enum CmragStatus cmrag_zscore(const double *values,
                              size_t len,
                              double *out,
                              double *out_mu,
                              double *out_sigma);

/**
 * Dual-sigmoid alignment loss of a batch of `b` query embeddings against
 * `b` target embeddings (row-major `b x dim` each); row `i` of both forms
 * the positive pair.
 *
 * # Safety
 * `queries` and `targets` must hold `b * dim` doubles; `out_loss` must be
 * valid.
 */
enum CmragStatus cmrag_dsa_loss(const double *queries,
                                const double *targets,
                                size_t b,
                                size_t dim,
                                double tau,
                                double eta,
                                double *out_loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMRAG_H */
