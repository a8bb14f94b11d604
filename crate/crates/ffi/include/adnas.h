#ifndef ADNAS_H
#define ADNAS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum AdnasStatus {
  ADNAS_STATUS_OK = 0,
  ADNAS_STATUS_NULL_POINTER = 1,
  ADNAS_STATUS_INVALID_ARGUMENT = 2,
  ADNAS_STATUS_SHAPE = 3,
  ADNAS_STATUS_CONFIG = 4,
  ADNAS_STATUS_TOTAL_CONFLICT = 5,
  ADNAS_STATUS_PRECONDITION = 6,
  ADNAS_STATUS_SAMPLING = 7,
  ADNAS_STATUS_UNDEFINED_METRIC = 8,
  ADNAS_STATUS_DIVERGENCE = 9,
  ADNAS_STATUS_PARSE = 10,
  ADNAS_STATUS_IO = 11,
  ADNAS_STATUS_UTF8 = 12,
  ADNAS_STATUS_PANIC = 13,
} AdnasStatus;

/**
 * A discretized fusion architecture.
 */
typedef struct AdnasGenotype AdnasGenotype;

/**
 * A subjective opinion: per-class beliefs plus uncertainty.
 */
typedef struct AdnasOpinion AdnasOpinion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *adnas_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *adnas_version(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void adnas_string_free(char *s);

/**
 * Creates an opinion over `n` classes from `belief[0..n]` and `uncertainty`.
 *
 * # Safety
 * `belief` must point to `n` doubles; `out` must be writable.
 */
enum AdnasStatus adnas_opinion_new(const double *belief,
                                   size_t n,
                                   double uncertainty,
                                   struct AdnasOpinion **out_opinion);

/**
 * Releases an opinion. NULL is ignored.
 *
 * # Safety
 * `o` must come from this library and not have been freed.
 */
void adnas_opinion_free(struct AdnasOpinion *o);

/**
 * Number of classes, or 0 for NULL.
 *
 * # Safety
 * `o` must be NULL or a live opinion.
 */
size_t adnas_opinion_classes(const struct AdnasOpinion *o);

/**
 * Copies the beliefs into `belief[0..len]`; `len` must equal the class count.
 *
 * # Safety
 * `o` must be a live opinion and `belief` must have room for `len` doubles.
 */
enum AdnasStatus adnas_opinion_belief(const struct AdnasOpinion *o, double *belief, size_t len);

/**
 * Uncertainty mass, or NaN for NULL.
 *
 * # Safety
 * `o` must be NULL or a live opinion.
 */
double adnas_opinion_uncertainty(const struct AdnasOpinion *o);

/**
 * Conflict mass between two opinions.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum AdnasStatus adnas_conflict(const struct AdnasOpinion *l,
                                const struct AdnasOpinion *m,
                                double *out_z);

/**
 * Combines two opinions into a new handle.
 *
 * # Safety
 * Handles must be live; `out_opinion` must be writable.
 */
enum AdnasStatus adnas_combine(const struct AdnasOpinion *l,
                               const struct AdnasOpinion *m,
                               struct AdnasOpinion **out_opinion);

/**
 * Upper bound on the loss of belief in class `g` when `m` is fused into `l`.
 *
 * # Safety
 * Handles must be live; `out_bound` must be writable.
 */
enum AdnasStatus adnas_degradation_bound(const struct AdnasOpinion *l,
                                         const struct AdnasOpinion *m,
                                         size_t g,
                                         double *out_bound);

/**
 * Area under the ROC curve of `scores` against 0/1 `labels`.
 *
 * # Safety
 * Both arrays must hold `n` elements; `out_auroc` must be writable.
 */
enum AdnasStatus adnas_auroc(const double *scores,
                             const uint8_t *labels,
                             size_t n,
                             double *out_auroc);

/**
 * Pixel-level AUROC over `count` row-major `h×w` maps and 0/1 masks.
 *
 * # Safety
 * `maps` and `masks` must hold `count*h*w` elements.
 */
enum AdnasStatus adnas_p_auroc(const double *maps,
                               const uint8_t *masks,
                               size_t count,
                               size_t h,
                               size_t w,
                               double *out_auroc);

/**
 * Normalized area under the per-region-overlap curve up to `fpr_cap`.
 *
 * # Safety
 * `maps` and `masks` must hold `count*h*w` elements.
 */
enum AdnasStatus adnas_aupro(const double *maps,
                             const uint8_t *masks,
                             size_t count,
                             size_t h,
                             size_t w,
                             double fpr_cap,
                             double *out_aupro);

/**
 * Number of 8-connected regions in a row-major 0/1 mask. When `labels` is
 * not NULL it receives, per pixel, 0 for background or the 1-based region
 * index in scanline order of first appearance.
 *
 * # Safety
 * `mask` must hold `h*w` bytes; `labels` NULL or room for `h*w` values.
 */
enum AdnasStatus adnas_connected_components(const uint8_t *mask,
                                            size_t h,
                                            size_t w,
                                            uint32_t *labels,
                                            size_t *out_count);

/**
 * Parses and validates a genotype from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out_genotype` writable.
 */
enum AdnasStatus adnas_genotype_parse(const char *json, struct AdnasGenotype **out_genotype);

/**
 * Serializes a genotype to JSON. Free the result with [`adnas_string_free`].
 *
 * # Safety
 * `g` must be live; `out_json` writable.
 */
enum AdnasStatus adnas_genotype_to_json(const struct AdnasGenotype *g, char **out_json);

/**
 * Releases a genotype. NULL is ignored.
 *
 * # Safety
 * `g` must come from this library and not have been freed.
 */
void adnas_genotype_free(struct AdnasGenotype *g);

/**
 * Validates `key = value` configuration text (NULL means defaults) and
 * returns its canonical form.
 *
 * # Safety
 * `config` NULL or NUL-terminated; `out_canonical` writable.
 */
enum AdnasStatus adnas_config_canonical(const char *config, char **out_canonical);

/**
 * Runs the bilevel search on the synthetic benchmark for `seed`.
 * `config` is `key = value` text or NULL for defaults; `msms` names the
 * modules (e.g. `"early,middle,late"`) or NULL for all three.
 *
 * # Safety
 * String arguments NULL or NUL-terminated; `out_genotype` writable.
 */
enum AdnasStatus adnas_search(const char *config,
                              const char *msms,
                              uint64_t seed,
                              struct AdnasGenotype **out_genotype);

/**
 * Monte-Carlo check of the evidence-combination guarantees; writes the JSON
 * report. Free it with [`adnas_string_free`].
 *
 * # Safety
 * `out_json` must be writable.
 */
enum AdnasStatus adnas_dst_verify(size_t trials, uint64_t seed, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADNAS_H */
