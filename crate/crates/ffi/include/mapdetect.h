#ifndef MAPDETECT_H
#define MAPDETECT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MdStatus {
  MD_STATUS_OK = 0,
  MD_STATUS_NULL_POINTER = 1,
  MD_STATUS_INVALID_ARGUMENT = 2,
  MD_STATUS_IO = 3,
  MD_STATUS_CHECKPOINT = 4,
  MD_STATUS_NUMERICAL = 5,
  MD_STATUS_INTERNAL = 6,
} MdStatus;

/**
 * Opaque handle to a trained prior.
 */
typedef struct MdPrior MdPrior;

/**
 * Restoration settings. Obtain defaults from [`md_restore_options_default`].
 */
typedef struct MdRestoreOptions {
  double lambda;
  size_t total_steps;
  uint64_t seed;
  /**
   * Nonzero for the proximal TV step, zero for the plain subgradient step.
   */
  uint8_t proximal;
} MdRestoreOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *md_last_error_message(void);

/**
 * Loads a checkpoint. Free the handle with [`md_prior_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum MdStatus md_prior_load(const char *path, struct MdPrior **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `prior` must come from [`md_prior_load`] and not be used afterwards.
 */
void md_prior_free(struct MdPrior *prior);

/**
 * Image height and width, latent size and number of mixture components
 * (1 for a VAE).
 *
 * # Safety
 * All pointers must be valid.
 */
enum MdStatus md_prior_info(const struct MdPrior *prior,
                            size_t *height,
                            size_t *width,
                            size_t *latent_dim,
                            size_t *mixture_count);

/**
 * Monte-Carlo ELBO of `count` images stored back to back; one value per
 * image is written to `out`.
 *
 * # Safety
 * `pixels` must hold `count * height * width` values and `out` `count`.
 */
enum MdStatus md_prior_elbo(const struct MdPrior *prior,
                            const double *pixels,
                            size_t count,
                            size_t samples,
                            uint64_t seed,
                            double *out);

struct MdRestoreOptions md_restore_options_default(void);

/**
 * MAP restoration of one image with the default step schedule. Writes the
 * restored image and the signed difference `Y - X`.
 *
 * # Safety
 * `pixels`, `foreground`, `restored` and `difference` must each hold
 * `height * width` elements matching the prior's image shape.
 */
enum MdStatus md_restore(const struct MdPrior *prior,
                         const double *pixels,
                         const uint8_t *foreground,
                         struct MdRestoreOptions options,
                         double *restored,
                         double *difference);

/**
 * Anisotropic total variation over in-mask neighbour pairs.
 *
 * # Safety
 * `image` and `mask` must hold `height * width` elements.
 */
enum MdStatus md_tv_norm(const double *image,
                         const uint8_t *mask,
                         size_t height,
                         size_t width,
                         double *out);

/**
 * Area under the ROC curve of pooled scores against 0/1 labels.
 *
 * # Safety
 * `scores` and `labels` must hold `count` elements.
 */
enum MdStatus md_roc_auc(const double *scores, const uint8_t *labels, size_t count, double *out);

/**
 * Dice coefficient of two 0/1 masks; 1 when both are empty.
 *
 * # Safety
 * `a` and `b` must hold `count` elements.
 */
enum MdStatus md_dice(const uint8_t *a, const uint8_t *b, size_t count, double *out);

/**
 * Smallest pool value `T` with at most `fpr_limit` of the pool above it.
 *
 * # Safety
 * `pool` must hold `count` elements.
 */
enum MdStatus md_select_threshold(const double *pool, size_t count, double fpr_limit, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAPDETECT_H */
