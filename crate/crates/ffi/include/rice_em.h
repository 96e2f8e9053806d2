#ifndef RICE_EM_H
#define RICE_EM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define RICE_FLAG_DEGENERATE 1

#define RICE_FLAG_NON_CONVERGED 2

#define RICE_FLAG_POSITIVITY_FAIL 4

typedef enum RiceStatus {
  RICE_STATUS_OK = 0,
  RICE_STATUS_NULL_POINTER = 1,
  RICE_STATUS_INVALID_ARGUMENT = 2,
  RICE_STATUS_DOMAIN = 3,
  RICE_STATUS_DEGENERATE = 4,
  RICE_STATUS_INITIALIZATION = 5,
  RICE_STATUS_RANK_DEFICIENT = 6,
  RICE_STATUS_PARSE = 7,
  RICE_STATUS_CONFIG = 8,
  RICE_STATUS_IO = 9,
  RICE_STATUS_PANIC = 10,
} RiceStatus;

typedef enum RiceNoise {
  RICE_NOISE_HIGH = 0,
  RICE_NOISE_LOW = 1,
} RiceNoise;

typedef enum RiceMethod {
  RICE_METHOD_MLE = 0,
  RICE_METHOD_MAP = 1,
  RICE_METHOD_LS = 2,
  RICE_METHOD_LS_TRUNC = 3,
  RICE_METHOD_WLS = 4,
  RICE_METHOD_WLS_TRUNC = 5,
  RICE_METHOD_RICIAN_DIRECT = 6,
} RiceMethod;

/**
 * Fit result handle.
 */
typedef struct RiceFit RiceFit;

/**
 * Acquisition scheme handle.
 */
typedef struct RiceScheme RiceScheme;

/**
 * Fit settings; start from `rice_fit_options_default()`.
 */
typedef struct RiceFitOptions {
  enum RiceMethod method;
  /**
   * 2 or 4.
   */
  uint8_t order;
  double alpha;
  uint32_t max_em_iters;
  /**
   * b cutoff of the truncated baselines.
   */
  double b_cutoff;
  /**
   * MAP prior precision `omega_scale * I`.
   */
  double omega_scale;
  double c1;
  double c2;
  bool positivity_projection;
} RiceFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, static storage.
 */
const char *rice_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful one. Valid until the next call on the same thread.
 */
const char *rice_last_error(void);

/**
 * The default 32-direction, 15-knot, 3-repetition scheme (1440 rows).
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum RiceStatus rice_scheme_default(struct RiceScheme **out);

/**
 * Factorial scheme: every direction (row-major `n_dirs x 3`) at every knot,
 * repeated `repetitions` times.
 *
 * # Safety
 * `dirs` must hold `3 * n_dirs` doubles, `knots` `n_knots` doubles; `out`
 * must be valid for a pointer write.
 */
enum RiceStatus rice_scheme_factorial(const double *dirs,
                                      size_t n_dirs,
                                      const double *knots,
                                      size_t n_knots,
                                      size_t repetitions,
                                      struct RiceScheme **out);

/**
 * Scheme from explicit rows: `b[i]` with unit direction `g[3i..3i+3]`.
 *
 * # Safety
 * `b` must hold `m` doubles and `g` `3 * m`; `out` must be valid for a
 * pointer write.
 */
enum RiceStatus rice_scheme_from_rows(const double *b,
                                      const double *g,
                                      size_t m,
                                      struct RiceScheme **out);

/**
 * Number of acquisitions, or 0 for NULL.
 *
 * # Safety
 * `scheme` must be NULL or a live handle.
 */
size_t rice_scheme_len(const struct RiceScheme *scheme);

/**
 * # Safety
 * `scheme` must be NULL or a handle not yet freed.
 */
void rice_scheme_free(struct RiceScheme *scheme);

/**
 * Draws one synthetic voxel from the shipped ground truth of the given
 * order and noise level into `out[0..m]`.
 *
 * # Safety
 * `scheme` must be a live handle and `out` must hold `m` doubles.
 */
enum RiceStatus rice_simulate(const struct RiceScheme *scheme,
                              uint8_t order,
                              enum RiceNoise noise,
                              uint64_t seed,
                              double *out,
                              size_t m);

/**
 * Defaults: ML estimation of an order-2 tensor.
 */
struct RiceFitOptions rice_fit_options_default(void);

/**
 * Fits one voxel of magnitudes `y[0..m]`. `options` may be NULL for the
 * defaults. A degenerate voxel is a successful fit with
 * `RICE_FLAG_DEGENERATE` set.
 *
 * # Safety
 * `scheme` must be a live handle, `y` must hold `m` doubles, `options`
 * must be NULL or valid, and `out` must be valid for a pointer write.
 */
enum RiceStatus rice_fit(const struct RiceScheme *scheme,
                         const double *y,
                         size_t m,
                         const struct RiceFitOptions *options,
                         struct RiceFit **out);

/**
 * Number of tensor coefficients (6 or 15), or 0 for NULL.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
size_t rice_fit_dim(const struct RiceFit *fit);

/**
 * Copies the tensor coefficients into `out[0..len]`; `len` must equal
 * `rice_fit_dim(fit)`.
 *
 * # Safety
 * `fit` must be a live handle and `out` must hold `len` doubles.
 */
enum RiceStatus rice_fit_theta(const struct RiceFit *fit, double *out, size_t len);

/**
 * Baseline signal power `S0^2`. NaN for NULL.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
double rice_fit_s0_sq(const struct RiceFit *fit);

/**
 * Noise variance. NaN for NULL.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
double rice_fit_sigma_sq(const struct RiceFit *fit);

/**
 * Marginal Rician log-likelihood at the estimate. NaN for NULL.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
double rice_fit_loglik(const struct RiceFit *fit);

/**
 * Mean diffusivity. NaN for NULL.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
double rice_fit_md(const struct RiceFit *fit);

/**
 * Fractional anisotropy; NaN for order-4 fits and NULL.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
double rice_fit_fa(const struct RiceFit *fit);

/**
 * Iterations (EM sweeps for ML/MAP), or 0 for NULL.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
uint32_t rice_fit_iterations(const struct RiceFit *fit);

/**
 * # Safety
 * `fit` must be NULL or a live handle.
 */
bool rice_fit_converged(const struct RiceFit *fit);

/**
 * Bitwise OR of the `RICE_FLAG_*` constants.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
uint32_t rice_fit_flags(const struct RiceFit *fit);

/**
 * # Safety
 * `fit` must be NULL or a handle not yet freed.
 */
void rice_fit_free(struct RiceFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RICE_EM_H */
