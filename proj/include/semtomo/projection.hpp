#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "semtomo/errors.hpp"
#include "semtomo/geometry.hpp"
#include "semtomo/kernel.hpp"

namespace semtomo {

// Beam-major cell storage shared by density fields and projected images:
// values[(i-1)*n_eng + (k-1)] for pointing i, energy bin k (both 1-based).
struct CellArray {
  int n_data = 0;
  int n_eng = 0;
  std::vector<double> values;

  CellArray() = default;
  CellArray(int nd, int ne, double fill = 0.0)
      : n_data(nd), n_eng(ne), values(static_cast<std::size_t>(nd) * ne, fill) {}

  double& at(int i, int k) {
    return values[static_cast<std::size_t>(i - 1) * n_eng + (k - 1)];
  }
  double at(int i, int k) const {
    return values[static_cast<std::size_t>(i - 1) * n_eng + (k - 1)];
  }
};

using DensityField = CellArray;
using ProjectionMatrix = CellArray;

// Density column i smoothed by the depth kernel, evaluated in depth bin t:
// conv_t = sum_{m=1}^t xi(i, m) * eta[t - m].
inline double convolve(const DensityField& f, const KernelVector& kern, int i, int t) {
  double s = 0.0;
  for (int m = 1; m <= t; ++m) s += f.at(i, m) * kern.bins[t - m];
  return s;
}

// ---------------------------------------------------------------------------
// Measured image stack.

struct ImageStack {
  CellArray data;   // intensities
  CellArray sigma;  // per-cell noise scale, > 0
  bool baseline_removed = false;
  std::vector<double> baseline;      // per-energy offset removed from data
  std::vector<double> recon_defect;  // per-cell rounding defect of residual + offset; mostly 0
  long clamped = 0;                  // noisy pixels clamped to 0 at generation

  int n_data() const { return data.n_data; }
  int n_eng() const { return data.n_eng; }
};

inline void validate_stack(const ImageStack& s) {
  if (s.n_data() < 1 || s.n_eng() < 1) throw data_error("stack: empty");
  if (s.sigma.n_data != s.n_data() || s.sigma.n_eng != s.n_eng())
    throw data_error("stack: sigma shape mismatch");
  if (s.data.values.size() != static_cast<std::size_t>(s.n_data()) * s.n_eng() ||
      s.sigma.values.size() != s.data.values.size())
    throw data_error("stack: storage size mismatch");
  for (double v : s.data.values)
    if (!std::isfinite(v)) throw data_error("stack: non-finite intensity");
  for (double v : s.sigma.values)
    if (!(v > 0.0) || !std::isfinite(v)) throw data_error("stack: sigma must be finite and > 0");
  if (s.baseline_removed && s.baseline.size() != static_cast<std::size_t>(s.n_eng()))
    throw data_error("stack: baseline length mismatch");
  if (s.baseline_removed && !s.recon_defect.empty() &&
      s.recon_defect.size() != s.data.values.size())
    throw data_error("stack: defect length mismatch");
}

// Split each energy plane into a constant baseline (the plane minimum) plus a
// residual.  The residual minimum is exactly 0 in every plane.  residual +
// baseline need not round back to the input, and no residual choice can fix
// that (when the baseline's sub-ulp remainder is exactly half an ulp of the
// target, every candidate sum is a round-to-even tie), so the per-cell defect
// is kept and re-applied on reconstruction, which is then bit-exact.  The
// defect is itself a small multiple of the cell's ulp, hence representable;
// the guard catches the astronomical dynamic ranges where it is not.
// Idempotent: a second pass finds minima of 0 and keeps stored defects.
inline void decompose_low_rank(ImageStack& s) {
  if (!s.baseline_removed) s.baseline.assign(s.n_eng(), 0.0);
  if (s.recon_defect.size() != s.data.values.size())
    s.recon_defect.assign(s.data.values.size(), 0.0);
  for (int k = 1; k <= s.n_eng(); ++k) {
    double m = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= s.n_data(); ++i) m = std::min(m, s.data.at(i, k));
    s.baseline[k - 1] += m;
    for (int i = 1; i <= s.n_data(); ++i) {
      const double v = s.data.at(i, k);
      const double r = v - m;
      const double d = r + m;
      const double e = v - d;
      if (d + e != v) throw data_error("decompose: rounding defect is not representable");
      s.data.at(i, k) = r;
      if (e != 0.0) s.recon_defect[static_cast<std::size_t>(i - 1) * s.n_eng() + (k - 1)] = e;
    }
  }
  s.baseline_removed = true;
}

inline void reconstruct_low_rank(ImageStack& s) {
  if (!s.baseline_removed) throw data_error("reconstruct_low_rank: stack is not decomposed");
  const bool defects = s.recon_defect.size() == s.data.values.size();
  for (int k = 1; k <= s.n_eng(); ++k)
    for (int i = 1; i <= s.n_data(); ++i) {
      double v = s.data.at(i, k) + s.baseline[k - 1];
      if (defects) v += s.recon_defect[static_cast<std::size_t>(i - 1) * s.n_eng() + (k - 1)];
      s.data.at(i, k) = v;
    }
  s.baseline.clear();
  s.recon_defect.clear();
  s.baseline_removed = false;
}

// ---------------------------------------------------------------------------
// Forward projection.
//
// All three resolution regimes integrate the kernel-smoothed density over the
// hemispherical interaction volume of radius R0(k) and normalize by 2*R0(k)^2,
// slab by slab: bin t contributes its thickness times the disc cross-section
// r_t^2 = R0(k)^2 - h(t-1)^2 at the top of the slab times the smoothed density
// seen by that slab.
//   coarse: the footprint never leaves the pixel, the slab sees conv_t of the
//           beam's own column.
//   mixed:  bins t <= k_in as coarse; deeper bins replace each column value by
//           a 3x3 footprint-weighted in-plane average before convolving.
//   fine:   the slab disc spans many pixels; conv_t is averaged over the
//           columns it touches with exact overlap areas, renormalized over the
//           in-raster part of the disc.

class Projector {
 public:
  // The regime is classified from the grid unless overridden (an override
  // with k_in = n_eng turns the mixed path into the coarse one everywhere,
  // which is useful for consistency checks).
  explicit Projector(Grid g, std::optional<ResolutionRegime> regime_override = {})
      : grid_(std::move(g)),
        regime_(regime_override ? *regime_override : classify_regime(grid_)) {
    if (regime_.k_in < 0 || regime_.k_in > grid_.n_eng())
      throw config_error("projector: k_in out of range");
    if (regime_.cls == ResolutionClass::coarse && regime_.k_in != grid_.n_eng())
      throw config_error("projector: coarse regime requires k_in = n_eng");
    if (regime_.cls == ResolutionClass::fine && regime_.k_in != 0)
      throw config_error("projector: fine regime requires k_in = 0");
    if (regime_.cls == ResolutionClass::mixed && regime_.k_in < 1)
      throw config_error("projector: mixed regime requires k_in >= 1");
    if (regime_.cls == ResolutionClass::mixed) build_mixed_weights();
    if (regime_.cls == ResolutionClass::fine) build_fine_tables();
  }

  const Grid& grid() const { return grid_; }
  const ResolutionRegime& regime() const { return regime_; }

  double project_cell(const DensityField& f, const KernelVector& kern, int i, int k) const {
    switch (regime_.cls) {
      case ResolutionClass::coarse:
        return cell_coarse(f, kern, i, k);
      case ResolutionClass::mixed:
        return k <= regime_.k_in ? cell_coarse(f, kern, i, k) : cell_mixed(f, kern, i, k);
      case ResolutionClass::fine:
        return cell_fine(f, kern, i, k);
    }
    return 0.0;
  }

  ProjectionMatrix project_all(const DensityField& f, const KernelVector& kern) const {
    check(f, kern);
    ProjectionMatrix out(grid_.n_data(), grid_.n_eng());
    for (int i = 1; i <= grid_.n_data(); ++i)
      for (int k = 1; k <= grid_.n_eng(); ++k) out.at(i, k) = project_cell(f, kern, i, k);
    return out;
  }

  // Cells (i, k) whose projection reads density voxel (i0, m0).  The mixed
  // list is the 3x3 superset (it may include cells whose footprint weight on
  // i0 is zero); recomputing those is harmless.
  std::vector<std::pair<int, int>> affected_cells(int i0, int m0) const {
    std::vector<std::pair<int, int>> out;
    switch (regime_.cls) {
      case ResolutionClass::coarse:
        for (int k = m0; k <= grid_.n_eng(); ++k) out.emplace_back(i0, k);
        break;
      case ResolutionClass::mixed: {
        for (int k = m0; k <= regime_.k_in; ++k) out.emplace_back(i0, k);
        const int bx = grid_.x_bin(i0), by = grid_.y_bin(i0);
        for (int k = std::max(m0, regime_.k_in + 1); k <= grid_.n_eng(); ++k)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
              if (grid_.in_grid(bx + dx, by + dy))
                out.emplace_back(grid_.index_of(bx + dx, by + dy), k);
        break;
      }
      case ResolutionClass::fine:
        for (const auto& e : rev_[i0 - 1])
          if (e.t_max >= m0) out.emplace_back(e.i, e.k);
        break;
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  void check(const DensityField& f, const KernelVector& kern) const {
    if (f.n_data != grid_.n_data() || f.n_eng != grid_.n_eng())
      throw data_error("projector: field shape mismatch");
    if (kern.size() != grid_.n_eng()) throw data_error("projector: kernel size mismatch");
  }

 private:
  double cell_coarse(const DensityField& f, const KernelVector& kern, int i, int k) const {
    const double R02 = grid_.radius(k) * grid_.radius(k);
    double c = 0.0;
    for (int t = 1; t <= k; ++t) {
      const double h0 = grid_.depth(t - 1);
      c += grid_.bin_width(t) * convolve(f, kern, i, t) * (R02 - h0 * h0) / (2.0 * R02);
    }
    return c;
  }

  double cell_mixed(const DensityField& f, const KernelVector& kern, int i, int k) const {
    static thread_local std::vector<double> xibar;
    xibar.assign(k, 0.0);
    for (int m = 1; m <= k; ++m) {
      double v = 0.0;
      for (const auto& [pt, w] : mixed_weights(i, k, m).entries) v += w * f.at(pt, m);
      xibar[m - 1] = v;
    }
    const double R02 = grid_.radius(k) * grid_.radius(k);
    double c = 0.0;
    for (int t = 1; t <= k; ++t) {
      double conv = 0.0;
      for (int m = 1; m <= t; ++m) conv += xibar[m - 1] * kern.bins[t - m];
      const double h0 = grid_.depth(t - 1);
      c += grid_.bin_width(t) * conv * (R02 - h0 * h0) / (2.0 * R02);
    }
    return c;
  }

  double cell_fine(const DensityField& f, const KernelVector& kern, int i, int k) const {
    const auto& tab = tables_[static_cast<std::size_t>(i - 1) * grid_.n_eng() + (k - 1)];
    const double R02 = tab.radius * tab.radius;
    double c = 0.0;
    for (std::size_t ti = 0; ti < tab.slabs.size(); ++ti) {
      const auto& row = tab.slabs[ti];
      const int t = static_cast<int>(ti) + 1;
      double acc = 0.0;
      for (const auto& [pt, a] : row.areas) acc += a * convolve(f, kern, pt, t);
      c += row.thickness * (acc / row.in_grid_area) * (row.radius * row.radius) / (2.0 * R02);
    }
    return c;
  }

  const NeighbourWeights& mixed_weights(int i, int k, int m) const {
    const std::size_t idx =
        ((static_cast<std::size_t>(k - regime_.k_in - 1) * grid_.n_eng()) + (m - 1)) *
            grid_.n_data() +
        (i - 1);
    return mixed_w_[idx];
  }

  void build_mixed_weights() {
    const int ne = grid_.n_eng(), nd = grid_.n_data();
    mixed_w_.resize(static_cast<std::size_t>(ne - regime_.k_in) * ne * nd);
    for (int k = regime_.k_in + 1; k <= ne; ++k)
      for (int m = 1; m <= k; ++m)
        for (int i = 1; i <= nd; ++i)
          mixed_w_[((static_cast<std::size_t>(k - regime_.k_in - 1) * ne) + (m - 1)) * nd +
                   (i - 1)] = footprint_weights(grid_, i, k, m);
  }

  void build_fine_tables() {
    const int ne = grid_.n_eng(), nd = grid_.n_data();
    tables_.reserve(static_cast<std::size_t>(nd) * ne);
    rev_.assign(nd, {});
    // t_max per (column, cell): slab discs shrink with t, so a column touched
    // by slab t is touched by every slab before it.
    std::vector<int> tmax(nd);
    for (int i = 1; i <= nd; ++i) {
      for (int k = 1; k <= ne; ++k) {
        OverlapTable tab = build_overlap_table(grid_, i, k, 22, false);
        std::fill(tmax.begin(), tmax.end(), 0);
        for (std::size_t ti = 0; ti < tab.slabs.size(); ++ti)
          for (const auto& [pt, a] : tab.slabs[ti].areas)
            tmax[pt - 1] = std::max(tmax[pt - 1], static_cast<int>(ti) + 1);
        for (int c = 1; c <= nd; ++c)
          if (tmax[c - 1] > 0) rev_[c - 1].push_back({i, k, tmax[c - 1]});
        tables_.push_back(std::move(tab));
      }
    }
  }

  struct RevEntry {
    int i, k, t_max;
  };

  Grid grid_;
  ResolutionRegime regime_;
  std::vector<NeighbourWeights> mixed_w_;   // mixed: [(k - k_in - 1), m, i]
  std::vector<OverlapTable> tables_;        // fine: [(i - 1) * n_eng + (k - 1)]
  std::vector<std::vector<RevEntry>> rev_;  // fine: column -> reading cells
};

}  // namespace semtomo
