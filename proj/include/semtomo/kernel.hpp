#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "semtomo/errors.hpp"
#include "semtomo/geometry.hpp"
#include "semtomo/rng.hpp"

namespace semtomo {

// Discretized depth-correction kernel.  bins[j] is the kernel value for depth
// offset j (the convolution pairs density bin m with bins[t - m] when
// projecting into depth bin t), so bins[0] is the sample-surface value and
// bins[j] is evaluated at depth h(j).
struct KernelVector {
  std::vector<double> bins;

  int size() const { return static_cast<int>(bins.size()); }
  double surface() const { return bins.at(0); }
};

// Rescale a kernel so its surface bin equals a measured physical value.
// Applying it twice with the same measurement is a no-op.
inline KernelVector normalized(const KernelVector& k, double measured_surface) {
  if (k.bins.empty()) throw config_error("normalized: empty kernel");
  if (!(k.surface() > 0.0)) throw config_error("normalized: surface bin must be > 0");
  if (!(measured_surface > 0.0)) throw config_error("normalized: measured surface must be > 0");
  const double factor = measured_surface / k.surface();
  KernelVector out = k;
  for (double& v : out.bins) v *= factor;
  return out;
}

// Folded-normal shape used by both kernel models:
//   shape(z) = amplitude * [exp(-(z-mode)^2 / 2s^2) + exp(-(z+mode)^2 / 2s^2)]
inline double folded_shape(double z, double amplitude, double mode_depth, double spread) {
  const double a = (z - mode_depth) / spread;
  const double b = (z + mode_depth) / spread;
  return amplitude * (std::exp(-0.5 * a * a) + std::exp(-0.5 * b * b));
}

// ---------------------------------------------------------------------------
// Parametric kernel model.  Three shape parameters (amplitude, mode depth,
// spread) of which only two are free: the surface value eta(0) is measured,
// which ties mode_depth = spread * sqrt(2 ln(2 amplitude / surface)).

struct ParametricKernel {
  double amplitude = 0.0;   // scale of the two Gaussian lobes
  double mode_depth = 0.0;  // depth of the peak response
  double spread = 0.0;      // lobe width
  double surface = 0.0;     // measured value at z = 0

  double eval(double z) const { return folded_shape(z, amplitude, mode_depth, spread); }

  KernelVector discretize(const Grid& g) const {
    KernelVector k;
    k.bins.resize(g.n_eng());
    for (int j = 0; j < g.n_eng(); ++j) k.bins[j] = eval(g.depth(j));
    return k;
  }
};

// Mode depth implied by (amplitude, spread) and the measured surface value.
// Requires 2*amplitude >= surface; equality forces mode_depth = 0.
inline double solve_mode_depth(double amplitude, double spread, double surface) {
  if (!(surface > 0.0)) throw config_error("solve_mode_depth: surface must be > 0");
  if (!(spread > 0.0)) throw config_error("solve_mode_depth: spread must be > 0");
  const double ratio = 2.0 * amplitude / surface;
  if (ratio < 1.0) throw config_error("solve_mode_depth: infeasible, 2*amplitude < surface");
  return spread * std::sqrt(2.0 * std::log(ratio));
}

// Spread implied by (amplitude, mode_depth) and the measured surface value.
// Returns nullopt when the surface tie cannot be satisfied.
inline std::optional<double> solve_spread(double amplitude, double mode_depth, double surface) {
  if (!(surface > 0.0) || !(amplitude > 0.0) || mode_depth < 0.0) return std::nullopt;
  const double ratio = 2.0 * amplitude / surface;
  if (ratio <= 1.0) return std::nullopt;  // needs strictly positive log for mode_depth > 0
  const double s = mode_depth / std::sqrt(2.0 * std::log(ratio));
  if (!(s > 0.0) || !std::isfinite(s)) return std::nullopt;
  return s;
}

inline ParametricKernel make_parametric_from_spread(double amplitude, double spread,
                                                    double surface) {
  ParametricKernel k;
  k.amplitude = amplitude;
  k.spread = spread;
  k.surface = surface;
  k.mode_depth = solve_mode_depth(amplitude, spread, surface);
  return k;
}

inline std::optional<ParametricKernel> make_parametric_from_mode(double amplitude,
                                                                 double mode_depth,
                                                                 double surface) {
  auto s = solve_spread(amplitude, mode_depth, surface);
  if (!s) return std::nullopt;
  ParametricKernel k;
  k.amplitude = amplitude;
  k.mode_depth = mode_depth;
  k.spread = *s;
  k.surface = surface;
  return k;
}

// Independent folded-normal priors on the free shape parameters.
struct ParametricPriorHyper {
  double amplitude_mean = 1.0, amplitude_sd = 1.0;
  double spread_mean = 1.0, spread_sd = 1.0;
};

inline double parametric_log_prior(double amplitude, double spread,
                                   const ParametricPriorHyper& h) {
  return log_folded_normal_pdf(amplitude, h.amplitude_mean, h.amplitude_sd) +
         log_folded_normal_pdf(spread, h.spread_mean, h.spread_sd);
}

// ---------------------------------------------------------------------------
// Distribution-free kernel model.  Each bin gets an independent folded-normal
// prior whose mean follows the parametric shape evaluated at h(k); the common
// prior spread is the value that makes the prior density at the known surface
// value equal exactly 1.

struct FreeKernelPrior {
  double amplitude = 0.0;   // shape hyperparameter
  double mode_depth = 0.0;  // shape hyperparameter
  double spread = 0.0;      // solved from the surface-density condition
  double surface = 0.0;
  std::vector<double> prior_mean;  // one entry per kernel bin

  // Solves prior_density(surface) == 1 for the common spread.  The density is
  //   f(s) = N_F(surface; amplitude*[...] at h(1), s),
  // scanned on a log grid for sign changes; the largest root is used (the
  // weakest prior).  Returns nullopt when no root exists; max_f_out, when
  // given, receives max density - 1 over the scan for diagnostics.
  static std::optional<FreeKernelPrior> try_solve(const Grid& g, double surface,
                                                  double amplitude, double mode_depth,
                                                  double* max_f_out = nullptr) {
    if (!(surface > 0.0)) throw config_error("free prior: surface must be > 0");
    if (!(amplitude > 0.0)) throw config_error("free prior: amplitude must be > 0");
    if (mode_depth < 0.0) throw config_error("free prior: mode_depth must be >= 0");
    auto density = [&](double s) {
      const double m = folded_shape(g.depth(1), amplitude, mode_depth, s);
      return folded_normal_pdf(surface, m, s);
    };
    const double lo = 1e-8, hi = 1e8;
    const int steps = 4000;
    double best_s = -1.0;
    double prev_s = lo, prev_f = density(lo) - 1.0;
    double max_f = prev_f;
    for (int j = 1; j <= steps; ++j) {
      const double s = lo * std::pow(hi / lo, static_cast<double>(j) / steps);
      const double f = density(s) - 1.0;
      max_f = std::max(max_f, f);
      if ((prev_f <= 0.0 && f >= 0.0) || (prev_f >= 0.0 && f <= 0.0)) {
        double a = prev_s, b = s, fa = prev_f;
        for (int it = 0; it < 200; ++it) {
          const double mid = 0.5 * (a + b);
          const double fm = density(mid) - 1.0;
          if ((fa <= 0.0) == (fm <= 0.0)) {
            a = mid;
            fa = fm;
          } else {
            b = mid;
          }
        }
        best_s = 0.5 * (a + b);  // keep scanning; the last (largest) root wins
      }
      prev_s = s;
      prev_f = f;
    }
    if (max_f_out) *max_f_out = max_f;
    if (best_s <= 0.0) return std::nullopt;
    FreeKernelPrior p;
    p.amplitude = amplitude;
    p.mode_depth = mode_depth;
    p.spread = best_s;
    p.surface = surface;
    p.prior_mean.resize(g.n_eng());
    for (int k = 1; k <= g.n_eng(); ++k)
      p.prior_mean[k - 1] = folded_shape(g.depth(k), amplitude, mode_depth, best_s);
    return p;
  }

  static FreeKernelPrior solve(const Grid& g, double surface, double amplitude,
                               double mode_depth) {
    double max_f = 0.0;
    auto p = try_solve(g, surface, amplitude, mode_depth, &max_f);
    if (!p)
      throw config_error("free prior: no spread solves the surface-density condition "
                         "(max density - 1 = " + std::to_string(max_f) + ")");
    return *p;
  }

  double log_prior(const KernelVector& k) const {
    if (k.size() != static_cast<int>(prior_mean.size()))
      throw config_error("free prior: kernel size mismatch");
    double lp = 0.0;
    for (int j = 0; j < k.size(); ++j)
      lp += log_folded_normal_pdf(k.bins[j], prior_mean[j], spread);
    return lp;
  }
};

// Starting kernel for inversion: a folded-normal shape with mode 5 um and
// spread 5 um sampled at the depth levels, rescaled so the surface bin equals
// the measured surface value.
inline KernelVector seed_kernel(const Grid& g, double surface) {
  if (!(surface > 0.0)) throw config_error("seed_kernel: surface must be > 0");
  KernelVector k;
  k.bins.resize(g.n_eng());
  const double g1 = folded_shape(g.depth(1), 1.0, 5.0, 5.0);
  for (int j = 0; j < g.n_eng(); ++j)
    k.bins[j] = folded_shape(g.depth(j + 1), 1.0, 5.0, 5.0) * surface / g1;
  return k;
}

}  // namespace semtomo
