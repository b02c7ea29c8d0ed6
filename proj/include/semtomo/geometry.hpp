#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "semtomo/errors.hpp"

namespace semtomo {

inline constexpr double pi = 3.14159265358979323846264338327950288;

// Electron-range material constants.  Lengths are micrometres, energies kV,
// mass density g/cm^3 throughout.
struct MaterialConstants {
  double atomic_number = 0.0;
  double atomic_weight = 0.0;
  double mass_density = 0.0;
  double range_coefficient = 0.0276;

  void validate() const {
    if (!(atomic_number >= 1.0)) throw config_error("material: atomic_number must be >= 1");
    if (!(atomic_weight > 0.0)) throw config_error("material: atomic_weight must be > 0");
    if (!(mass_density > 0.0)) throw config_error("material: mass_density must be > 0");
    if (!(range_coefficient > 0.0)) throw config_error("material: range_coefficient must be > 0");
  }
};

// Kanaya-Okayama penetration depth in micrometres for a beam energy in kV.
inline double kanaya_depth(const MaterialConstants& m, double energy_kv) {
  m.validate();
  if (energy_kv < 0.0) throw config_error("kanaya_depth: energy must be >= 0");
  return m.range_coefficient * m.atomic_weight * std::pow(energy_kv, 1.67) /
         (m.mass_density * std::pow(m.atomic_number, 0.89));
}

struct BeamXY {
  int x = 0;  // 1-based X bin
  int y = 0;  // 1-based Y bin
};

namespace detail {
inline int isqrt_exact(int n, const char* who) {
  int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (r * r != n) throw config_error(std::string(who) + ": n_data must be a perfect square");
  return r;
}
}  // namespace detail

// Beam-pointing index <-> (x, y) bins.  Bins are 1-based; the raster is
// x-major, so i = x + (y - 1) * n_side.  Indices i that are exact multiples
// of n_side map to the last column of their row (residue 0 -> n_side).
inline BeamXY beam_xy(int i, int n_data) {
  const int n = detail::isqrt_exact(n_data, "beam_xy");
  if (i < 1 || i > n_data) throw config_error("beam_xy: index out of range");
  return BeamXY{(i - 1) % n + 1, (i - 1) / n + 1};
}

inline int beam_index(int x, int y, int n_data) {
  const int n = detail::isqrt_exact(n_data, "beam_index");
  if (x < 1 || x > n || y < 1 || y > n) throw config_error("beam_index: bin out of range");
  return x + (y - 1) * n;
}

// Discretized sample geometry: an n_side x n_side raster of beam pointings
// with pixel pitch omega, and per-energy depth levels h(k) equal to the
// interaction-volume radii (hemispherical volumes, R0(k) = h(k)).
class Grid {
 public:
  static Grid from_material(double omega, int n_side, std::vector<double> energies,
                            const MaterialConstants& m) {
    std::vector<double> depths;
    depths.reserve(energies.size());
    for (double e : energies) depths.push_back(kanaya_depth(m, e));
    return Grid(omega, n_side, std::move(energies), std::move(depths));
  }

  static Grid with_depths(double omega, int n_side, std::vector<double> energies,
                          std::vector<double> depths) {
    return Grid(omega, n_side, std::move(energies), std::move(depths));
  }

  double omega() const { return omega_; }
  int n_side() const { return n_side_; }
  int n_data() const { return n_side_ * n_side_; }
  int n_eng() const { return static_cast<int>(energies_.size()); }

  double energy(int k) const { return energies_.at(k - 1); }
  // h(k); depth(0) == 0 is the sample surface.
  double depth(int k) const { return k == 0 ? 0.0 : depths_.at(k - 1); }
  double radius(int k) const { return depth(k); }
  double bin_width(int k) const { return depth(k) - depth(k - 1); }

  const std::vector<double>& energies() const { return energies_; }
  const std::vector<double>& depths() const { return depths_; }

  int x_bin(int i) const { return (i - 1) % n_side_ + 1; }
  int y_bin(int i) const { return (i - 1) / n_side_ + 1; }
  int index_of(int x, int y) const { return x + (y - 1) * n_side_; }
  bool in_grid(int x, int y) const { return x >= 1 && x <= n_side_ && y >= 1 && y <= n_side_; }

  // Pixel-centre coordinate measured from the raster corner.
  double center_x(int i) const { return (x_bin(i) - 0.5) * omega_; }
  double center_y(int i) const { return (y_bin(i) - 0.5) * omega_; }
  // Pixel-centre coordinate measured from the raster midpoint.
  double centered_x(int i) const { return (x_bin(i) - 0.5 * (n_side_ + 1)) * omega_; }
  double centered_y(int i) const { return (y_bin(i) - 0.5 * (n_side_ + 1)) * omega_; }

 private:
  Grid(double omega, int n_side, std::vector<double> energies, std::vector<double> depths)
      : omega_(omega), n_side_(n_side), energies_(std::move(energies)), depths_(std::move(depths)) {
    if (!(omega_ > 0.0)) throw config_error("grid: omega must be > 0");
    if (n_side_ < 1) throw config_error("grid: n_side must be >= 1");
    if (energies_.empty()) throw config_error("grid: needs at least one energy");
    if (depths_.size() != energies_.size())
      throw config_error("grid: depths and energies must have equal length");
    for (std::size_t j = 0; j < energies_.size(); ++j) {
      if (!(energies_[j] > 0.0)) throw config_error("grid: energies must be > 0");
      if (j > 0 && !(energies_[j] > energies_[j - 1]))
        throw config_error("grid: energies must be strictly increasing");
      if (!(depths_[j] > 0.0)) throw config_error("grid: depths must be > 0");
      if (j > 0 && !(depths_[j] > depths_[j - 1]))
        throw config_error("grid: depths must be strictly increasing");
    }
  }

  double omega_ = 0.0;
  int n_side_ = 0;
  std::vector<double> energies_;
  std::vector<double> depths_;
};

// Resolution classes: at every energy the interaction-volume footprint either
// fits inside one pixel (coarse), never fits (fine), or fits up to bin k_in
// and spills beyond it (mixed).
enum class ResolutionClass { coarse, mixed, fine };

struct ResolutionRegime {
  ResolutionClass cls = ResolutionClass::coarse;
  // Largest k whose footprint disc fits inside a pixel; n_eng for coarse,
  // 0 for fine, 1 <= k_in < n_eng for mixed.
  int k_in = 0;
};

inline ResolutionRegime classify_regime(const Grid& g) {
  const double w2 = g.omega() * g.omega();
  int k_in = 0;
  for (int k = 1; k <= g.n_eng(); ++k) {
    if (pi * g.radius(k) * g.radius(k) <= w2) k_in = k;
  }
  // Radii increase with k, so the footprint condition is monotone.
  if (k_in == g.n_eng()) return {ResolutionClass::coarse, k_in};
  if (k_in == 0) return {ResolutionClass::fine, 0};
  return {ResolutionClass::mixed, k_in};
}

inline const char* regime_name(ResolutionClass c) {
  switch (c) {
    case ResolutionClass::coarse: return "coarse";
    case ResolutionClass::mixed: return "mixed";
    case ResolutionClass::fine: return "fine";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Exact disc / rectangle intersection area.

namespace detail {

// Area of {x^2 + y^2 <= r^2} ∩ {x <= X, y <= Y}.
inline double disc_cumulative(double X, double Y, double r) {
  if (X <= -r || Y <= -r) return 0.0;
  X = std::min(X, r);
  const double r2 = r * r;
  auto H = [&](double x) {
    const double c = std::clamp(x / r, -1.0, 1.0);
    return 0.5 * (x * std::sqrt(std::max(0.0, r2 - x * x)) + r2 * std::asin(c));
  };
  auto chord = [&](double a, double b) { return b > a ? 2.0 * (H(b) - H(a)) : 0.0; };
  if (Y >= r) return chord(-r, X);
  const double xs = std::sqrt(std::max(0.0, r2 - Y * Y));
  if (Y >= 0.0) {
    double area = chord(-r, std::min(X, -xs));
    const double b = std::clamp(X, -xs, xs);
    if (b > -xs) area += Y * (b + xs) + (H(b) - H(-xs));
    area += chord(xs, std::max(X, xs));
    return area;
  }
  const double b = std::clamp(X, -xs, xs);
  if (b <= -xs) return 0.0;
  return Y * (b + xs) + (H(b) - H(-xs));
}

}  // namespace detail

inline double circle_rect_overlap(double r, double x0, double x1, double y0, double y1) {
  if (!(r > 0.0) || x1 <= x0 || y1 <= y0) return 0.0;
  const double a = detail::disc_cumulative(x1, y1, r) - detail::disc_cumulative(x0, y1, r) -
                   detail::disc_cumulative(x1, y0, r) + detail::disc_cumulative(x0, y0, r);
  return std::max(0.0, a);
}

// ---------------------------------------------------------------------------
// Hemisphere / cuboid volume overlap.

struct Box3 {
  double x0, x1, y0, y1, z0, z1;
};

// Fraction of the box volume inside the hemisphere x^2+y^2+z^2 <= R^2, z >= 0,
// centred at the origin.  Boxes are expected to satisfy z0 >= 0.  Partial
// overlaps are integrated on a fixed midpoint lattice (lattice_n^3 points),
// which keeps the result deterministic.
inline double hemisphere_box_overlap_fraction(const Box3& b, double radius, int lattice_n = 22) {
  if (!(radius > 0.0)) return 0.0;
  const double r2 = radius * radius;
  auto sq = [](double v) { return v * v; };
  const double nx = std::clamp(0.0, b.x0, b.x1);
  const double ny = std::clamp(0.0, b.y0, b.y1);
  const double nz = std::clamp(0.0, b.z0, b.z1);
  if (sq(nx) + sq(ny) + sq(nz) >= r2) return 0.0;
  const double fx = std::max(std::fabs(b.x0), std::fabs(b.x1));
  const double fy = std::max(std::fabs(b.y0), std::fabs(b.y1));
  const double fz = std::max(std::fabs(b.z0), std::fabs(b.z1));
  if (sq(fx) + sq(fy) + sq(fz) <= r2) return 1.0;

  const int n = std::max(2, lattice_n);
  const double dx = (b.x1 - b.x0) / n;
  const double dy = (b.y1 - b.y0) / n;
  const double dz = (b.z1 - b.z0) / n;
  long inside = 0;
  for (int iz = 0; iz < n; ++iz) {
    const double z = b.z0 + (iz + 0.5) * dz;
    if (z < 0.0) continue;
    const double zz = r2 - z * z;
    if (zz <= 0.0) continue;
    for (int iy = 0; iy < n; ++iy) {
      const double y = b.y0 + (iy + 0.5) * dy;
      const double yy = zz - y * y;
      if (yy <= 0.0) continue;
      for (int ix = 0; ix < n; ++ix) {
        const double x = b.x0 + (ix + 0.5) * dx;
        if (x * x <= yy) ++inside;
      }
    }
  }
  return static_cast<double>(inside) / (static_cast<double>(n) * n * n);
}

// ---------------------------------------------------------------------------
// Overlap tables for one interaction volume.
//
// The ik-th interaction volume is the hemisphere of radius R0(k) = h(k)
// centred at the pixel centre of pointing i on the sample surface.  The table
// records, per voxel, the fraction of the voxel volume inside the hemisphere,
// and per depth bin t the exact footprint areas of the top-of-slab disc of
// radius sqrt(R0(k)^2 - h(t-1)^2) over the pixel columns it touches.

struct VoxelOverlap {
  int dx = 0;          // column offset from the central pointing, X bins
  int dy = 0;          // column offset, Y bins
  int pointing = -1;   // beam-pointing index, -1 when outside the raster
  int bin = 0;         // depth bin t, 1-based
  double fraction = 0; // volume fraction in [0, 1]
  bool full = false;
  bool off_grid = false;
};

struct SlabRow {
  double radius = 0.0;     // disc radius at the top of the slab
  double thickness = 0.0;  // h(t) - h(t-1)
  double in_grid_area = 0.0;
  double off_grid_area = 0.0;
  // (pointing, overlap area) for in-raster columns with positive overlap.
  std::vector<std::pair<int, double>> areas;
};

struct OverlapTable {
  int pointing = 0;
  int energy_index = 0;
  double radius = 0.0;
  std::vector<VoxelOverlap> voxels;
  std::vector<SlabRow> slabs;  // index t-1 for depth bin t

  // Total overlap volume implied by the voxel fractions (voxel volume is
  // omega^2 * bin width); equals the hemisphere volume when the hemisphere
  // is interior to the raster.
  double total_overlap_volume(const Grid& g) const {
    double v = 0.0;
    for (const auto& e : voxels) v += e.fraction * g.omega() * g.omega() * g.bin_width(e.bin);
    return v;
  }
};

// with_voxels = false skips the per-voxel volume fractions (the slab rows are
// exact and cheap; the voxel lattice integration is not).
inline OverlapTable build_overlap_table(const Grid& g, int i, int k, int lattice_n = 22,
                                        bool with_voxels = true) {
  if (i < 1 || i > g.n_data()) throw config_error("build_overlap_table: pointing out of range");
  if (k < 1 || k > g.n_eng()) throw config_error("build_overlap_table: energy index out of range");
  OverlapTable tab;
  tab.pointing = i;
  tab.energy_index = k;
  const double R0 = g.radius(k);
  tab.radius = R0;
  const double w = g.omega();
  const double r2 = R0 * R0;
  const int bx = g.x_bin(i), by = g.y_bin(i);
  auto sq = [](double v) { return v * v; };

  const int reach = with_voxels ? static_cast<int>(R0 / w) + 1 : -1;
  for (int dy = -reach; dy <= reach; ++dy) {
    for (int dx = -reach; dx <= reach; ++dx) {
      const double cx0 = (dx - 0.5) * w, cx1 = (dx + 0.5) * w;
      const double cy0 = (dy - 0.5) * w, cy1 = (dy + 0.5) * w;
      const double near_xy = sq(std::clamp(0.0, cx0, cx1)) + sq(std::clamp(0.0, cy0, cy1));
      if (near_xy >= r2) continue;
      const double far_xy = sq(std::max(std::fabs(cx0), std::fabs(cx1))) +
                            sq(std::max(std::fabs(cy0), std::fabs(cy1)));
      const bool off = !g.in_grid(bx + dx, by + dy);
      const int pt = off ? -1 : g.index_of(bx + dx, by + dy);
      for (int t = 1; t <= k; ++t) {
        const double z0 = g.depth(t - 1), z1 = g.depth(t);
        if (near_xy + z0 * z0 >= r2) break;  // deeper bins are farther still
        VoxelOverlap e;
        e.dx = dx;
        e.dy = dy;
        e.pointing = pt;
        e.off_grid = off;
        e.bin = t;
        if (far_xy + z1 * z1 <= r2) {
          e.fraction = 1.0;
          e.full = true;
        } else {
          e.fraction =
              hemisphere_box_overlap_fraction({cx0, cx1, cy0, cy1, z0, z1}, R0, lattice_n);
          if (e.fraction <= 0.0) continue;
        }
        tab.voxels.push_back(e);
      }
    }
  }

  for (int t = 1; t <= k; ++t) {
    const double rt2 = r2 - sq(g.depth(t - 1));
    if (rt2 <= 0.0) break;
    SlabRow row;
    row.radius = std::sqrt(rt2);
    row.thickness = g.bin_width(t);
    const int sreach = static_cast<int>(row.radius / w) + 1;
    for (int dy = -sreach; dy <= sreach; ++dy) {
      for (int dx = -sreach; dx <= sreach; ++dx) {
        const double a = circle_rect_overlap(row.radius, (dx - 0.5) * w, (dx + 0.5) * w,
                                             (dy - 0.5) * w, (dy + 0.5) * w);
        if (a <= 1e-300) continue;
        if (g.in_grid(bx + dx, by + dy)) {
          row.areas.emplace_back(g.index_of(bx + dx, by + dy), a);
          row.in_grid_area += a;
        } else {
          row.off_grid_area += a;
        }
      }
    }
    tab.slabs.push_back(std::move(row));
  }
  return tab;
}

// ---------------------------------------------------------------------------
// In-plane neighbour weights for the mixed regime.
//
// For a projection at energy k evaluated in depth bin m, densities are
// averaged over the 3x3 neighbourhood of the pointing with weights equal to
// the overlap area between each pixel square and the disc of radius
// sqrt(R0(k)^2 - z_mid^2) (z_mid the bin midpoint), renormalized over the
// pixels that exist; the neighbourhood is capped at the 9 in-plane pixels.

struct NeighbourWeights {
  std::vector<std::pair<int, double>> entries;  // (pointing, weight), weights sum to 1
};

inline NeighbourWeights footprint_weights(const Grid& g, int i, int outer_k, int bin_m) {
  const double R0 = g.radius(outer_k);
  const double zmid = 0.5 * (g.depth(bin_m - 1) + g.depth(bin_m));
  const double rr = R0 * R0 - zmid * zmid;
  NeighbourWeights w;
  if (rr <= 0.0) {
    w.entries.emplace_back(i, 1.0);
    return w;
  }
  const double r = std::sqrt(rr);
  const double ww = g.omega();
  const int bx = g.x_bin(i), by = g.y_bin(i);
  double total = 0.0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      if (!g.in_grid(bx + dx, by + dy)) continue;
      const double a = circle_rect_overlap(r, (dx - 0.5) * ww, (dx + 0.5) * ww,
                                           (dy - 0.5) * ww, (dy + 0.5) * ww);
      if (a <= 0.0) continue;
      w.entries.emplace_back(g.index_of(bx + dx, by + dy), a);
      total += a;
    }
  }
  if (w.entries.empty() || total <= 0.0) {
    w.entries.clear();
    w.entries.emplace_back(i, 1.0);
    return w;
  }
  for (auto& e : w.entries) e.second /= total;
  return w;
}

}  // namespace semtomo
