#pragma once

// Reference implementations for the projection chains, written independently
// of the library paths, plus randomized desk-scale instance generators.

#include <semtomo/projection.hpp>
#include <semtomo/rng.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace oracle {

using namespace semtomo;

// disc-rectangle overlap via adaptive Simpson between analytic breakpoints;
// eps stays fixed down the recursion so the stop test never drops below the
// floating-point noise floor
template <class F>
double adsimp(const F& f, double a, double b, double fa, double fm, double fb, double whole,
              double eps, int depth) {
  const double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double both = left + right;
  if (depth <= 0 || std::abs(both - whole) <= 15.0 * eps)
    return both + (both - whole) / 15.0;
  return adsimp(f, a, m, fa, flm, fm, left, eps, depth - 1) +
         adsimp(f, m, b, fm, frm, fb, right, eps, depth - 1);
}

inline double area_ref(double r, double x0, double x1, double y0, double y1) {
  const double lo = std::max(x0, -r), hi = std::min(x1, r);
  if (!(r > 0.0) || lo >= hi || y0 >= y1) return 0.0;
  auto len = [&](double x) {
    const double s = std::sqrt(std::max(0.0, r * r - x * x));
    return std::max(0.0, std::min(y1, s) - std::max(y0, -s));
  };
  std::vector<double> bp{lo, hi};
  for (double y : {y0, y1})
    if (std::abs(y) < r) {
      const double x = std::sqrt(r * r - y * y);
      for (double s : {-x, x})
        if (s > lo && s < hi) bp.push_back(s);
    }
  std::sort(bp.begin(), bp.end());
  double total = 0.0;
  for (std::size_t j = 0; j + 1 < bp.size(); ++j) {
    const double a = bp[j], b = bp[j + 1], m = 0.5 * (a + b);
    const double fa = len(a), fm = len(m), fb = len(b);
    const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    total += adsimp(len, a, b, fa, fm, fb, whole, 1e-16 * r * r, 44);
  }
  return total;
}

// ring-by-ring transcription of the coarse projection chain, indices <= 0
// pinned to depth 0 and the empty inner sum dropped
inline double eq_ring_ref(const Grid& g, const std::vector<double>& xi,
                          const std::vector<double>& eta, int k) {
  auto h = [&](int t) { return t <= 0 ? 0.0 : g.depth(t); };
  double outer = 0.0;
  for (int q = 1; q <= k; ++q) {
    double mid = 0.0;
    for (int t = 1; t <= q; ++t) {
      double conv = 0.0;
      for (int m = 1; m <= t; ++m)
        conv += xi[static_cast<std::size_t>(m - 1)] * eta[static_cast<std::size_t>(t - m)];
      mid += (h(t) - h(t - 1)) * conv;
    }
    outer += 0.5 * (h(q) * h(q) - h(q - 1) * h(q - 1)) * mid;
  }
  return outer / (h(k) * h(k));
}

inline std::vector<double> column_of(const DensityField& f, int i) {
  std::vector<double> xi(static_cast<std::size_t>(f.n_eng));
  for (int m = 1; m <= f.n_eng; ++m) xi[static_cast<std::size_t>(m - 1)] = f.at(i, m);
  return xi;
}

inline double model1_ref(const Grid& g, const DensityField& f, const std::vector<double>& eta,
                         int i, int k) {
  return eq_ring_ref(g, column_of(f, i), eta, k);
}

// explicit neighbour enumeration for the footprint-averaged column
inline double model2_ref(const Grid& g, const DensityField& f, const std::vector<double>& eta,
                         int i, int k, int k_in) {
  if (k <= k_in) return model1_ref(g, f, eta, i, k);
  const double r0 = g.depth(k);
  const int bx = g.x_bin(i), by = g.y_bin(i);
  std::vector<double> xibar(static_cast<std::size_t>(k), 0.0);
  for (int m = 1; m <= k; ++m) {
    const double zmid = 0.5 * (g.depth(m - 1) + g.depth(m));
    const double rr = r0 * r0 - zmid * zmid;
    double num = 0.0, den = 0.0;
    bool any = false;
    if (rr > 0.0) {
      const double r = std::sqrt(rr), w = g.omega();
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (!g.in_grid(bx + dx, by + dy)) continue;
          const double a =
              area_ref(r, (dx - 0.5) * w, (dx + 0.5) * w, (dy - 0.5) * w, (dy + 0.5) * w);
          if (a <= 0.0) continue;
          num += a * f.at(g.index_of(bx + dx, by + dy), m);
          den += a;
          any = true;
        }
    }
    xibar[static_cast<std::size_t>(m - 1)] = (any && den > 0.0) ? num / den : f.at(i, m);
  }
  return eq_ring_ref(g, xibar, eta, k);
}

// Monte-Carlo of the projection integral: per depth slab, points uniform on
// the lateral disc, off-raster points discarded (the renormalisation over the
// in-raster disc portion)
inline double model3_mc(const Grid& g, const DensityField& f, const KernelVector& kern, int i,
                        int k, int n_per_slab, Rng& rng) {
  const double r0 = g.radius(k);
  const double cx = g.center_x(i), cy = g.center_y(i);
  double c = 0.0;
  for (int t = 1; t <= k; ++t) {
    const double h0 = g.depth(t - 1);
    const double rt = std::sqrt(r0 * r0 - h0 * h0);
    double sum = 0.0;
    long kept = 0;
    for (int s = 0; s < n_per_slab; ++s) {
      const double rad = rt * std::sqrt(rng.uniform01());
      const double ang = two_pi * rng.uniform01();
      const double x = cx + rad * std::cos(ang);
      const double y = cy + rad * std::sin(ang);
      const int xb = static_cast<int>(std::floor(x / g.omega())) + 1;
      const int yb = static_cast<int>(std::floor(y / g.omega())) + 1;
      if (!g.in_grid(xb, yb)) continue;
      sum += convolve(f, kern, g.index_of(xb, yb), t);
      ++kept;
    }
    if (kept == 0) throw std::runtime_error("mc slab: no in-grid samples");
    c += g.bin_width(t) * (sum / static_cast<double>(kept)) * (rt * rt) / (2.0 * r0 * r0);
  }
  return c;
}

inline DensityField random_field(const Grid& g, Rng& rng, double lo = 0.0, double hi = 1.0) {
  DensityField f(g.n_data(), g.n_eng());
  for (double& v : f.values) v = rng.uniform(lo, hi);
  return f;
}

inline KernelVector random_kernel(int n, Rng& rng) {
  KernelVector k;
  k.bins.resize(static_cast<std::size_t>(n));
  for (double& v : k.bins) v = rng.uniform(0.1, 2.0);
  return k;
}

inline Grid random_coarse_grid(Rng& rng) {
  const int n_side = 1 + static_cast<int>(rng.uniform01() * 5.0);
  const int n_eng = 1 + static_cast<int>(rng.uniform01() * 4.0);
  std::vector<double> eng, dep;
  double h = 0.0;
  for (int k = 1; k <= n_eng; ++k) {
    eng.push_back(k);
    h += rng.uniform(0.02, 0.5 / n_eng);  // keeps pi h^2 < 1 = omega^2
    dep.push_back(h);
  }
  return Grid::with_depths(1.0, n_side, eng, dep);
}

inline Grid random_mixed_grid(Rng& rng, int& k_in_out) {
  const int n_side = 2 + static_cast<int>(rng.uniform01() * 4.0);
  const int n_eng = 2 + static_cast<int>(rng.uniform01() * 3.0);
  const int k_in = 1 + static_cast<int>(rng.uniform01() * (n_eng - 1));
  std::vector<double> eng, dep;
  const double shallow_cap = 1.0 / std::sqrt(pi);  // boundary of the contained regime
  for (int k = 1; k <= n_eng; ++k) {
    eng.push_back(k);
    if (k <= k_in)
      dep.push_back(shallow_cap * (0.12 + 0.8 * k / static_cast<double>(k_in + 1)));
    else
      dep.push_back(shallow_cap * (1.05 + 0.9 * (k - k_in)) + rng.uniform(0.0, 0.2));
  }
  k_in_out = k_in;
  return Grid::with_depths(1.0, n_side, eng, dep);
}

// every energy's footprint exceeds the pixel: h(1) >= 1.3 * omega
inline Grid random_fine_grid(Rng& rng) {
  const int n_side = 2 + static_cast<int>(rng.uniform01() * 4.0);
  const int n_eng = 1 + static_cast<int>(rng.uniform01() * 4.0);
  const double omega = 0.08 + 0.12 * rng.uniform01();
  std::vector<double> eng, dep;
  double h = omega;
  for (int k = 1; k <= n_eng; ++k) {
    eng.push_back(k);
    h += rng.uniform(0.3, 0.8) * omega;
    dep.push_back(h);
  }
  return Grid::with_depths(omega, n_side, eng, dep);
}

}  // namespace oracle
