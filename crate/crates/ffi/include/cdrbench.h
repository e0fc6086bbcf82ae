#ifndef CDRBENCH_H
#define CDRBENCH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum CdrStatus {
  CDR_STATUS_OK = 0,
  CDR_STATUS_NULL_POINTER = 1,
  CDR_STATUS_INVALID_UTF8 = 2,
  CDR_STATUS_INVALID_ARGUMENT = 3,
  CDR_STATUS_PARSE_FAILURE = 4,
  CDR_STATUS_IO = 5,
  CDR_STATUS_PANIC = 6,
} CdrStatus;

/**
 * Loaded eval set.
 */
typedef struct CdrEvalSet CdrEvalSet;

/**
 * Label to rating table.
 */
typedef struct CdrLabelMap CdrLabelMap;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cdr_last_error(void);

/**
 * Library version, static.
 */
const char *cdr_version(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void cdr_string_free(char *s);

/**
 * Number of likelihood labels (6).
 */
size_t cdr_label_count(void);

/**
 * Static name of label `index` (0 = "Very Unlikely"), or null when out of range.
 */
const char *cdr_label_name(size_t index);

/**
 * Label map from six strictly increasing values in `[0.5, 5.0]`.
 *
 * # Safety
 * `values` must point to 6 doubles; `out` must be writable.
 */
enum CdrStatus cdr_label_map_new(const double *values, struct CdrLabelMap **out);

/**
 * Named preset: "default" or "half_point".
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum CdrStatus cdr_label_map_preset(const char *name, struct CdrLabelMap **out);

/**
 * Rating assigned to label `index`.
 *
 * # Safety
 * `map` must be a live handle; `out` must be writable.
 */
enum CdrStatus cdr_label_map_rating(const struct CdrLabelMap *map, size_t index, double *out);

/**
 * # Safety
 * `map` must come from this library and not have been freed. Null is ignored.
 */
void cdr_label_map_free(struct CdrLabelMap *map);

/**
 * Find the likelihood label in a model reply and map it to a rating.
 * `map` may be null for the default table. `out_ambiguous` may be null.
 *
 * # Safety
 * Pointers must be valid as described.
 */
enum CdrStatus cdr_parse_rating(const char *text,
                                const struct CdrLabelMap *map,
                                size_t *out_label,
                                double *out_rating,
                                bool *out_ambiguous);

/**
 * Recover a full ranking of `n` candidates from a model reply. On success
 * `out_permutation[0..n]` holds candidate indices, best first.
 * `out_dropped` (nullable) receives the number of unmatched emitted items.
 *
 * # Safety
 * `candidates` must hold `n` NUL-terminated strings and `out_permutation`
 * room for `n` entries.
 */
enum CdrStatus cdr_parse_ranking(const char *text,
                                 const char *const *candidates,
                                 size_t n,
                                 double threshold,
                                 size_t *out_permutation,
                                 size_t *out_dropped);

/**
 * MRR@k and NDCG@k over `n` 1-based positive ranks, each out of `k_total`
 * candidates.
 *
 * # Safety
 * `ranks` must hold `n` entries; outputs must be writable.
 */
enum CdrStatus cdr_ranking_metrics(const size_t *ranks,
                                   size_t n,
                                   size_t k_total,
                                   size_t cutoff,
                                   double *out_mrr,
                                   double *out_ndcg);

/**
 * MAE and RMSE over `n` (truth, prediction) pairs.
 *
 * # Safety
 * `truth` and `predicted` must hold `n` entries; outputs must be writable.
 */
enum CdrStatus cdr_rating_metrics(const double *truth,
                                  const double *predicted,
                                  size_t n,
                                  double *out_mae,
                                  double *out_rmse);

/**
 * Load a line-delimited eval set file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CdrStatus cdr_evalset_open(const char *path, struct CdrEvalSet **out);

/**
 * Number of instances in the set.
 *
 * # Safety
 * `set` must be a live handle; `out` must be writable.
 */
enum CdrStatus cdr_evalset_len(const struct CdrEvalSet *set, size_t *out);

/**
 * Render the prompt of instance `index` for a variant such as
 * "with-ranking-high". The returned string is freed with `cdr_string_free`.
 *
 * # Safety
 * `set` must be a live handle, `variant` a NUL-terminated string and `out`
 * writable.
 */
enum CdrStatus cdr_evalset_render(const struct CdrEvalSet *set,
                                  size_t index,
                                  const char *variant,
                                  char **out);

/**
 * 0-based index of the positive item in instance `index`'s candidate list.
 *
 * # Safety
 * `set` must be a live handle; `out` must be writable.
 */
enum CdrStatus cdr_evalset_positive_index(const struct CdrEvalSet *set, size_t index, size_t *out);

/**
 * # Safety
 * `set` must come from this library and not have been freed. Null is ignored.
 */
void cdr_evalset_free(struct CdrEvalSet *set);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDRBENCH_H */
