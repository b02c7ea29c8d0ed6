#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace semtomo {

inline constexpr double two_pi = 6.283185307179586476925286766559;
inline constexpr double sqrt_two_pi = 2.5066282746310005024157652848110;

// Deterministic random source.  Every draw is derived from raw engine output
// through fixed arithmetic (no std::*_distribution objects), so sequences are
// bit-reproducible and the full generator state is just the engine state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // [0, 1)
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // (0, 1]
  double uniform_open01() { return 1.0 - uniform01(); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller, one value per call; no cached state.
  double normal(double mean = 0.0, double sd = 1.0) {
    const double u1 = uniform_open01();
    const double u2 = uniform01();
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    return mean + sd * z;
  }

  // |N(mean, sd)|
  double folded_normal(double mean, double sd) { return std::fabs(normal(mean, sd)); }

  double exponential(double rate) { return -std::log(uniform_open01()) / rate; }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

 private:
  std::mt19937_64 engine_;
};

// Density of |N(mean, sd)| on x >= 0.
inline double folded_normal_pdf(double x, double mean, double sd) {
  if (x < 0.0 || sd <= 0.0) return 0.0;
  const double a = (x - mean) / sd;
  const double b = (x + mean) / sd;
  return (std::exp(-0.5 * a * a) + std::exp(-0.5 * b * b)) / (sd * sqrt_two_pi);
}

inline double log_folded_normal_pdf(double x, double mean, double sd) {
  if (x < 0.0 || sd <= 0.0) return -std::numeric_limits<double>::infinity();
  const double a = (x - mean) / sd;
  const double b = (x + mean) / sd;
  const double la = -0.5 * a * a;
  const double lb = -0.5 * b * b;
  const double hi = std::max(la, lb);
  const double lo = std::min(la, lb);
  return hi + std::log1p(std::exp(lo - hi)) - std::log(sd * sqrt_two_pi);
}

inline double log_exponential_pdf(double x, double rate) {
  if (x < 0.0 || rate <= 0.0) return -std::numeric_limits<double>::infinity();
  return std::log(rate) - rate * x;
}

}  // namespace semtomo
