#pragma once

#include <cmath>

#include "semtomo/errors.hpp"

namespace semtomo {

// Projection decay ratio tau for energy bin k >= 2: C_k / C_{k-1} when the
// projected signal is not growing (C_k <= C_{k-1}, C_{k-1} != 0), otherwise 1.
// Bin 1 has no predecessor and uses tau = 1.  tau = 0 happens exactly when
// C_k = 0 under a nonzero predecessor.
inline double sparsity_ratio(double c_k, double c_prev) {
  if (c_prev != 0.0 && c_k <= c_prev) return c_k / c_prev;
  return 1.0;
}

// Shrinkage exponent nu(tau, p) = p^tau * (1 - p)^(1 - tau), p in (0, 1).
// Decaying columns (small tau) get nu near 1 - p, flat ones get nu near p.
inline double shrink_exponent(double tau, double p) {
  return std::pow(p, tau) * std::pow(1.0 - p, 1.0 - tau);
}

// Unnormalized log prior of one density voxel, exp(-(xi * nu)^2).
inline double log_field_prior_term(double xi, double nu) {
  const double t = xi * nu;
  return -t * t;
}

// Uniform support of the shrinkage hyperparameter.
struct PSupport {
  double lo = 0.6;
  double hi = 0.99;
};

inline constexpr double p_seed_default = 0.795;
inline constexpr double p_walk_halfwidth = 0.02;

// Fold x into [lo, hi] by reflecting at the boundaries.  The fold is an
// involution, so a symmetric random-walk step stays symmetric under it.
inline double reflect_into(double x, double lo, double hi) {
  if (!(hi > lo)) throw config_error("reflect_into: empty interval");
  const double span = hi - lo;
  const double period = 2.0 * span;
  double y = std::fmod(x - lo, period);
  if (y < 0.0) y += period;
  return y <= span ? lo + y : lo + (period - y);
}

}  // namespace semtomo
