#ifndef TMFM_H
#define TMFM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TmfmStatus {
  TMFM_STATUS_OK = 0,
  TMFM_STATUS_NULL_POINTER = 1,
  TMFM_STATUS_INVALID_ARGUMENT = 2,
  TMFM_STATUS_DIMENSION_MISMATCH = 3,
  TMFM_STATUS_BUFFER_TOO_SMALL = 4,
  TMFM_STATUS_PRECONDITION = 5,
  TMFM_STATUS_NUMERICAL = 6,
  TMFM_STATUS_PANIC = 7,
} TmfmStatus;

typedef enum TmfmSampler {
  TMFM_SAMPLER_FM = 0,
  TMFM_SAMPLER_TM_EULER = 1,
  TMFM_SAMPLER_TM_EXACT = 2,
} TmfmSampler;

typedef enum TmfmCostPreset {
  TMFM_COST_PRESET_IMAGE = 0,
  TMFM_COST_PRESET_VIDEO = 1,
} TmfmCostPreset;

/**
 * Opaque target handle.
 */
typedef struct TmfmTarget TmfmTarget;

/**
 * Path scalars at time `t`: `B`, `A`, `k = A / B`, `tau2 = sigma^2 / B`.
 */
typedef struct TmfmPathCoefficients {
  double t;
  double b;
  double a;
  double k;
  double tau2;
} TmfmPathCoefficients;

typedef struct TmfmCostModel {
  double c_backbone;
  double c_head;
  double kappa;
} TmfmCostModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message, NUL-terminated and
 * truncated to `cap` bytes. Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t tmfm_last_error_message(char *buf, size_t cap);

/**
 * Target `N(mu, sigma^2 I_d)`.
 *
 * # Safety
 * `mu` must point to `d` readable doubles; `out` must be writable.
 */
enum TmfmStatus tmfm_target_unimodal_new(const double *mu,
                                         size_t d,
                                         double sigma,
                                         struct TmfmTarget **out);

/**
 * Mixture of `k` isotropic components; `means` is row-major `k x d`.
 *
 * # Safety
 * `weights` and `sigmas` must point to `k` doubles, `means` to `k * d`;
 * `out` must be writable.
 */
enum TmfmStatus tmfm_target_mixture_new(const double *weights,
                                        const double *means,
                                        const double *sigmas,
                                        size_t k,
                                        size_t d,
                                        struct TmfmTarget **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `target` must be null or a handle from `tmfm_target_*_new` not yet freed.
 */
void tmfm_target_free(struct TmfmTarget *target);

/**
 * # Safety
 * `target` must be a live handle; `out` must be writable.
 */
enum TmfmStatus tmfm_target_dim(const struct TmfmTarget *target, size_t *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum TmfmStatus tmfm_path_coefficients(double t, double sigma, struct TmfmPathCoefficients *out);

/**
 * Posterior responsibilities `w_t(x, j)`; a unimodal target gives `[1]`.
 *
 * # Safety
 * `x` must point to `d` doubles and `out` to `out_len` writable doubles.
 */
enum TmfmStatus tmfm_responsibilities(const struct TmfmTarget *target,
                                      double t,
                                      const double *x,
                                      size_t d,
                                      double *out,
                                      size_t out_len);

/**
 * `E[V | X_t = x]`, the exact FM velocity.
 *
 * # Safety
 * `x` and `out` must each point to `d` doubles.
 */
enum TmfmStatus tmfm_conditional_mean(const struct TmfmTarget *target,
                                      double t,
                                      const double *x,
                                      size_t d,
                                      double *out);

/**
 * Closed-form per-step variances `s_n`, `n = 0..=N`, for FM and TM on
 * `N(mu, sigma^2 I_d)`. Both buffers need `N + 1` entries; `s_tm` may be
 * null when only FM is wanted. `sampler` selects the TM inner mode and is
 * ignored for `s_fm`.
 *
 * # Safety
 * Non-null buffers must hold `len` writable doubles.
 */
enum TmfmStatus tmfm_variance_trace(double sigma,
                                    size_t n_outer,
                                    size_t n_inner,
                                    enum TmfmSampler sampler,
                                    double *s_fm,
                                    double *s_tm,
                                    size_t len);

/**
 * `KL(N(mu_p, s_p I_d) || N(mu_q, s_q I_d))`.
 *
 * # Safety
 * `mu_p` and `mu_q` must point to `d` doubles; `out` must be writable.
 */
enum TmfmStatus tmfm_gaussian_kl(const double *mu_p,
                                 double s_p,
                                 const double *mu_q,
                                 double s_q,
                                 size_t d,
                                 double *out);

/**
 * Run `m` trajectories to `t = 1` and write the final states row-major
 * into `out` (`m * d` doubles). `n_inner` is ignored for FM.
 *
 * # Safety
 * `target` must be a live handle and `out` must hold `out_len` doubles.
 */
enum TmfmStatus tmfm_run_sampler(const struct TmfmTarget *target,
                                 enum TmfmSampler sampler,
                                 size_t n_outer,
                                 size_t n_inner,
                                 size_t m,
                                 uint64_t seed,
                                 double *out,
                                 size_t out_len);

/**
 * # Safety
 * `out` must be writable.
 */
enum TmfmStatus tmfm_cost_model_preset(enum TmfmCostPreset preset, struct TmfmCostModel *out);

/**
 * Modeled cost `N C_B` (FM) or `N C_B + N S C_H` (TM).
 *
 * # Safety
 * `model` must be readable and `out` writable.
 */
enum TmfmStatus tmfm_cost(const struct TmfmCostModel *model,
                          enum TmfmSampler sampler,
                          size_t n_outer,
                          size_t n_inner,
                          double *out);

/**
 * `kappa / N`, not rounded.
 *
 * # Safety
 * `model` must be readable and `out` writable.
 */
enum TmfmStatus tmfm_delta_inner_steps(const struct TmfmCostModel *model,
                                       double n_outer,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TMFM_H */
