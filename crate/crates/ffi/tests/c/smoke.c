#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "rice_em.h"

#define CHECK(cond)                                                   \
  do {                                                                \
    if (!(cond)) {                                                    \
      const char *err = rice_last_error();                            \
      fprintf(stderr, "check failed: %s (%s)\n", #cond, err ? err : "-"); \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  RiceScheme *scheme = NULL;
  CHECK(rice_scheme_default(&scheme) == RICE_STATUS_OK);
  size_t m = rice_scheme_len(scheme);
  CHECK(m == 1440);

  double *y = malloc(m * sizeof(double));
  CHECK(rice_simulate(scheme, 2, RICE_NOISE_LOW, 42, y, m) == RICE_STATUS_OK);

  RiceFitOptions opts = rice_fit_options_default();
  RiceFit *fit = NULL;
  CHECK(rice_fit(scheme, y, m, &opts, &fit) == RICE_STATUS_OK);
  CHECK(rice_fit_converged(fit));
  CHECK(rice_fit_dim(fit) == 6);
  double theta[6];
  CHECK(rice_fit_theta(fit, theta, 6) == RICE_STATUS_OK);
  CHECK(fabs(rice_fit_sigma_sq(fit) / 12.8821 - 1.0) < 0.2);
  CHECK(rice_fit_fa(fit) > 0.5 && rice_fit_fa(fit) < 1.0);
  printf("sigma_sq=%.6f fa=%.4f flags=%u\n", rice_fit_sigma_sq(fit), rice_fit_fa(fit), rice_fit_flags(fit));

  opts.order = 3;
  RiceFit *bad = NULL;
  CHECK(rice_fit(scheme, y, m, &opts, &bad) == RICE_STATUS_INVALID_ARGUMENT);
  CHECK(bad == NULL && rice_last_error() != NULL);

  rice_fit_free(fit);
  rice_scheme_free(scheme);
  free(y);
  return 0;
}
