#ifndef BLOCKSPARSE_H
#define BLOCKSPARSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum BsStatus {
  BS_STATUS_OK = 0,
  BS_STATUS_NULL_POINTER = 1,
  BS_STATUS_SHAPE = 2,
  BS_STATUS_NON_FINITE = 3,
  BS_STATUS_INVALID_PARAMETER = 4,
  BS_STATUS_DOMAIN = 5,
  BS_STATUS_IO = 6,
  BS_STATUS_FORMAT = 7,
  BS_STATUS_PANIC = 8,
} BsStatus;

/**
 * One attention head: Q, K, V of shape `n x d`.
 */
typedef struct BsHead BsHead;

/**
 * Heads read from a tensor file.
 */
typedef struct BsHeadList BsHeadList;

/**
 * Block mask together with the grid it was built for.
 */
typedef struct BsMask BsMask;

/**
 * Selection settings; see [`bs_selection_config_default`].
 */
typedef struct BsSelectionConfig {
  double tau;
  size_t sink_tokens;
  size_t local_tokens_min;
  size_t segment_size;
  size_t block_q;
  size_t block_k;
} BsSelectionConfig;

typedef struct BsCalibrationParams {
  double theta;
  double tau0;
  uint32_t max_halvings;
  struct BsSelectionConfig selection;
} BsCalibrationParams;

typedef struct BsAccounting {
  size_t computed;
  size_t skipped;
  size_t total;
  double sparsity;
} BsAccounting;

typedef struct BsCalibrationResult {
  double tau;
  uint32_t halvings;
  /**
   * True when the halving limit was reached without meeting theta.
   */
  bool floor_reached;
  /**
   * Largest per-sample error at `tau`.
   */
  double max_err;
} BsCalibrationResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call into this library from the
 * same thread.
 */
const char *bs_last_error(void);

/**
 * Default selection settings (tau 0.004, 32 sink tokens, at least 128 local
 * tokens, segments of 4 blocks, 64-row query blocks, 32-row key blocks).
 */
struct BsSelectionConfig bs_selection_config_default(void);

/**
 * Default calibration settings (theta 0.4, tau0 0.008, 30 halvings).
 */
struct BsCalibrationParams bs_calibration_params_default(void);

/**
 * Copies `q`, `k`, `v` (each `n * d` floats) into a new head.
 *
 * # Safety
 * `q`, `k`, `v` must each point to `n * d` readable floats; `out` must be
 * a valid pointer to write the handle to.
 */
enum BsStatus bs_head_new(size_t n,
                          size_t d,
                          const float *q,
                          const float *k,
                          const float *v,
                          struct BsHead **out);

/**
 * # Safety
 * `head` must be null or a handle from [`bs_head_new`] not freed before.
 */
void bs_head_free(struct BsHead *head);

/**
 * Token count of `head`, or 0 for a null handle.
 *
 * # Safety
 * `head` must be null or a live handle.
 */
size_t bs_head_n(const struct BsHead *head);

/**
 * Head dimension of `head`, or 0 for a null handle.
 *
 * # Safety
 * `head` must be null or a live handle.
 */
size_t bs_head_d(const struct BsHead *head);

/**
 * Dense causal attention into `out` (`n * d` floats).
 *
 * # Safety
 * `head` must be a live handle and `out` must point to `out_len` writable
 * floats.
 */
enum BsStatus bs_full_attention(const struct BsHead *head, float *out, size_t out_len);

/**
 * Quantizes `head` and runs block selection with `config`.
 *
 * # Safety
 * `head` and `config` must be valid; `out` must be writable.
 */
enum BsStatus bs_select(const struct BsHead *head,
                        const struct BsSelectionConfig *config,
                        struct BsMask **out);

/**
 * Mask with every causal tile selected, for a sequence of `n` tokens.
 *
 * # Safety
 * `out` must be writable.
 */
enum BsStatus bs_mask_all_causal(size_t n, size_t block_q, size_t block_k, struct BsMask **out);

/**
 * # Safety
 * `mask` must be null or a live handle.
 */
void bs_mask_free(struct BsMask *mask);

/**
 * Query-block and key-block counts of `mask`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum BsStatus bs_mask_dims(const struct BsMask *mask, size_t *n_q, size_t *n_k);

/**
 * Whether tile `(i, j)` is selected.
 *
 * # Safety
 * All pointers must be valid.
 */
enum BsStatus bs_mask_get(const struct BsMask *mask, size_t i, size_t j, bool *out);

/**
 * Sets tile `(i, j)`. Bits on tiles entirely above the diagonal are
 * accepted and ignored by [`bs_sparse_attention`].
 *
 * # Safety
 * `mask` must be a live handle.
 */
enum BsStatus bs_mask_set(struct BsMask *mask, size_t i, size_t j, bool value);

/**
 * Computed, skipped and total causal tiles, and the skipped fraction.
 *
 * # Safety
 * All pointers must be valid.
 */
enum BsStatus bs_mask_accounting(const struct BsMask *mask, struct BsAccounting *out);

/**
 * Exact attention over the tiles selected in `mask`. `coverage`, if not
 * null, receives the number of keys each of the `n` rows attended to.
 *
 * # Safety
 * `head` and `mask` must be live handles; `out` must point to `out_len`
 * writable floats; `coverage` must be null or point to `coverage_len`
 * writable elements.
 */
enum BsStatus bs_sparse_attention(const struct BsHead *head,
                                  const struct BsMask *mask,
                                  float *out,
                                  size_t out_len,
                                  size_t *coverage,
                                  size_t coverage_len);

/**
 * Per-head threshold calibration over `count` samples of the same head.
 *
 * # Safety
 * `samples` must point to `count` live head handles; `params` and `out`
 * must be valid.
 */
enum BsStatus bs_calibrate_head(const struct BsHead *const *samples,
                                size_t count,
                                const struct BsCalibrationParams *params,
                                struct BsCalibrationResult *out);

/**
 * `sum |a - b| / n` over two `n x d` matrices.
 *
 * # Safety
 * `a` and `b` must point to `n * d` readable floats; `out` must be valid.
 */
enum BsStatus bs_l1_error(size_t n, size_t d, const float *a, const float *b, double *out);

/**
 * Reads every head of a tensor file.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum BsStatus bs_read_tensor_file(const char *path, struct BsHeadList **out);

/**
 * # Safety
 * `list` must be null or a live handle.
 */
size_t bs_head_list_len(const struct BsHeadList *list);

/**
 * Borrowed head `index` of `list`, or null when out of range. The pointer
 * is valid until the list is freed and must not be passed to
 * [`bs_head_free`].
 *
 * # Safety
 * `list` must be null or a live handle.
 */
const struct BsHead *bs_head_list_get(const struct BsHeadList *list, size_t index);

/**
 * # Safety
 * `list` must be null or a live handle.
 */
void bs_head_list_free(struct BsHeadList *list);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* BLOCKSPARSE_H */
