#ifndef CVAE_NF_H
#define CVAE_NF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum CvaeStatus {
  CVAE_STATUS_OK = 0,
  CVAE_STATUS_NULL_POINTER = 1,
  CVAE_STATUS_INVALID_ARGUMENT = 2,
  CVAE_STATUS_IO = 3,
  CVAE_STATUS_CHECKPOINT = 4,
  CVAE_STATUS_SHAPE = 5,
  CVAE_STATUS_NUMERIC = 6,
  CVAE_STATUS_INTERNAL = 7,
  CVAE_STATUS_PANIC = 8,
} CvaeStatus;

/**
 * Model settings as reported by [`cvae_model_dims`].
 */
typedef enum CvaeSetting {
  CVAE_SETTING_GAUSSIAN = 0,
  CVAE_SETTING_SIGMA_NONNF = 1,
  CVAE_SETTING_SIGMA_NF = 2,
} CvaeSetting;

/**
 * Opaque handle to a loaded model.
 */
typedef struct CvaeModelHandle CvaeModelHandle;

typedef struct CvaeDims {
  size_t channels;
  size_t height;
  size_t width;
  size_t latent_dim;
  size_t attr_dim;
} CvaeDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. Valid until the next failing call
 * on the same thread.
 */
const char *cvae_last_error(void);

/**
 * Loads a checkpoint written by the `cvae-nf train` command.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid for one write.
 */
enum CvaeStatus cvae_model_load(const char *path, struct CvaeModelHandle **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `h` must be null or a handle from [`cvae_model_load`] not yet freed.
 */
void cvae_model_free(struct CvaeModelHandle *h);

/**
 * # Safety
 * `h` must be a live handle; `dims` and `setting` valid for one write each.
 */
enum CvaeStatus cvae_model_dims(const struct CvaeModelHandle *h,
                                struct CvaeDims *dims,
                                enum CvaeSetting *setting);

/**
 * Decoder variance stored with the checkpoint.
 *
 * # Safety
 * `h` must be a live handle; `out` valid for one write.
 */
enum CvaeStatus cvae_model_sigma_sq(const struct CvaeModelHandle *h, double *out);

/**
 * Draws `n` images, one per attribute row. `out_len` must equal `n * C * H * W`.
 *
 * # Safety
 * `attrs` must hold `n * A` values and `out` `out_len` writable values.
 */
enum CvaeStatus cvae_sample(const struct CvaeModelHandle *h,
                            const float *attrs,
                            size_t n,
                            uint64_t seed,
                            bool through_flow,
                            float *out,
                            size_t out_len);

/**
 * Reconstructs `n` images at the posterior mean.
 *
 * # Safety
 * `images` and `out` must hold `n * C * H * W` values, `attrs` `n * A`.
 */
enum CvaeStatus cvae_reconstruct(const struct CvaeModelHandle *h,
                                 const float *images,
                                 const float *attrs,
                                 size_t n,
                                 float *out,
                                 size_t out_len);

/**
 * Mean per-image negative log-likelihood of `n` images at the posterior mean, using the
 * checkpoint's decoder variance.
 *
 * # Safety
 * `images` must hold `n * C * H * W` values, `attrs` `n * A`, `out` one writable value.
 */
enum CvaeStatus cvae_nll(const struct CvaeModelHandle *h,
                         const float *images,
                         const float *attrs,
                         size_t n,
                         double *out);

/**
 * Fréchet distance between `N(mean_a, cov_a)` and `N(mean_b, cov_b)` in `dim` dimensions.
 * Covariances are row-major `dim x dim`.
 *
 * # Safety
 * Means must hold `dim` values, covariances `dim * dim`, `out` one writable value.
 */
enum CvaeStatus cvae_frechet(const double *mean_a,
                             const double *cov_a,
                             const double *mean_b,
                             const double *cov_b,
                             size_t dim,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CVAE_NF_H */
