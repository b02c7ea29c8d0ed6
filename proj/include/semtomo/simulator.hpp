#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "semtomo/errors.hpp"
#include "semtomo/geometry.hpp"
#include "semtomo/kernel.hpp"
#include "semtomo/posterior.hpp"
#include "semtomo/projection.hpp"
#include "semtomo/rng.hpp"

namespace semtomo {

// Synthetic-scene description.  Length units micrometres, energies kV.
struct SimSpec {
  std::string name;
  MaterialConstants material;
  double omega = 0.0;
  int n_side = 0;
  std::vector<double> energies;

  bool sparse = false;       // dense: every column lit; sparse: integer thinning
  double eps_soft = 1.0;     // softening constant in the density profile
  int b_range_mult = 5;      // column width B is uniform on [0, b_range_mult * omega]
  double kernel_mode = 0.0;  // depth of the true-kernel peak
  double kernel_spread = 0.0;
  double noise_fraction = 0.05;
  double sigma_min = 1e-6;
  std::uint64_t seed = 1;

  void validate() const {
    material.validate();
    if (!(omega > 0.0)) throw config_error("sim: omega must be > 0");
    if (n_side < 1) throw config_error("sim: n_side must be >= 1");
    if (energies.empty()) throw config_error("sim: needs at least one energy");
    if (!(eps_soft > 0.0)) throw config_error("sim: eps_soft must be > 0");
    if (b_range_mult < 1) throw config_error("sim: b_range_mult must be >= 1");
    if (!(kernel_spread > 0.0)) throw config_error("sim: kernel_spread must be > 0");
    if (kernel_mode < 0.0) throw config_error("sim: kernel_mode must be >= 0");
    if (noise_fraction < 0.0 || noise_fraction > 0.1)
      throw config_error("sim: noise_fraction must be in [0, 0.1]");
    if (!(sigma_min > 0.0)) throw config_error("sim: sigma_min must be > 0");
  }

  Grid make_grid() const { return Grid::from_material(omega, n_side, energies, material); }

  NoiseModel noise() const { return NoiseModel{noise_fraction, sigma_min}; }
};

// Ground-truth density columns: per pointing a softened radial profile
//   xi = U * A / (eps^2 + (x^2 + y^2)/B^2 + h_k^2 / (B^2 (1 - Q^2)))
// with A ~ U[0,1], B ~ U[0, mult*omega] (zero redrawn), Q ~ U[0,1) (one
// redrawn), x, y the pixel centre relative to the raster midpoint.  U is 1 in
// dense mode and the integer part of n_eng * U1 in sparse mode, so sparse
// scenes carry exact-zero columns.  Per-pointing draw order is fixed:
// [U1 if sparse], A, B, Q.
inline DensityField gen_true_density(const SimSpec& spec, const Grid& g, Rng& rng) {
  spec.validate();
  DensityField f(g.n_data(), g.n_eng());
  const double eps2 = spec.eps_soft * spec.eps_soft;
  for (int i = 1; i <= g.n_data(); ++i) {
    double ups = 1.0;
    if (spec.sparse) ups = std::floor(g.n_eng() * rng.uniform01());
    const double a = rng.uniform01();
    double b = 0.0;
    do {
      b = rng.uniform(0.0, spec.b_range_mult * g.omega());
    } while (b == 0.0);
    double q = 0.0;
    do {
      q = rng.uniform01();
    } while (q == 1.0);
    const double x = g.centered_x(i), y = g.centered_y(i);
    const double plane = (x * x + y * y) / (b * b);
    const double depth_scale = 1.0 / (b * b * (1.0 - q * q));
    for (int k = 1; k <= g.n_eng(); ++k) {
      const double h = g.depth(k);
      f.at(i, k) = ups * a / (eps2 + plane + h * h * depth_scale);
    }
  }
  return f;
}

// Ground-truth kernel: a folded-normal shape with peak depth kernel_mode and
// width kernel_spread, sampled on the kernel's depth offsets (bin j at depth
// h(j), bin 0 at the surface).  Decays with depth beyond the peak.
inline KernelVector gen_true_kernel(const SimSpec& spec, const Grid& g) {
  if (!(spec.kernel_spread > 0.0)) throw config_error("true kernel: spread must be > 0");
  if (spec.kernel_mode < 0.0) throw config_error("true kernel: mode must be >= 0");
  KernelVector kern;
  kern.bins.resize(g.n_eng());
  for (int j = 0; j < g.n_eng(); ++j)
    kern.bins[j] = folded_shape(g.depth(j), 1.0, spec.kernel_mode, spec.kernel_spread);
  return kern;
}

// Noisy image stack: data = C + N(0, (f*C)^2) clamped at 0, sigma stored with
// the noise-model floor.  Pixel loop is pointing-major, then energy.
inline ImageStack gen_images(const Projector& proj, const DensityField& f,
                             const KernelVector& kern, const NoiseModel& noise, Rng& rng) {
  const Grid& g = proj.grid();
  ImageStack s;
  s.data = proj.project_all(f, kern);
  s.sigma = CellArray(g.n_data(), g.n_eng());
  for (int i = 1; i <= g.n_data(); ++i)
    for (int k = 1; k <= g.n_eng(); ++k) {
      const double c = s.data.at(i, k);
      const double noisy = c + rng.normal(0.0, noise.intensity_fraction * c);
      s.data.at(i, k) = noisy < 0.0 ? (++s.clamped, 0.0) : noisy;
      s.sigma.at(i, k) = noise.sigma_for(c);
    }
  return s;
}

// Desk-sized scenarios, one per resolution regime, in dense and sparse
// variants.  The two alloys bracket heavy and light matrices; the fine pair
// reuses the heavy alloy under a 2 nm raster.
inline std::vector<SimSpec> preset_scenarios() {
  const MaterialConstants cuw{51.5, 123.7, 14.0, 0.0276};
  const MaterialConstants nial{20.5, 42.845, 5.9, 0.0276};
  auto energies = [](double base, int n) {
    std::vector<double> e(n);
    for (int k = 1; k <= n; ++k) e[k - 1] = base + k;
    return e;
  };

  std::vector<SimSpec> out;
  for (int sparse = 0; sparse <= 1; ++sparse) {
    SimSpec cw;
    cw.name = sparse ? "cuw-sparse-desk" : "cuw-dense-desk";
    cw.material = cuw;
    cw.omega = 1.33;
    cw.n_side = 5;
    cw.energies = energies(2.0, 5);  // 3..7 kV, footprint within one pixel
    cw.sparse = sparse;
    cw.kernel_mode = 0.08;
    cw.kernel_spread = 0.07;
    cw.noise_fraction = 0.03;
    cw.seed = 101 + sparse;
    out.push_back(cw);

    SimSpec ni;
    ni.name = sparse ? "nial-sparse-desk" : "nial-dense-desk";
    ni.material = nial;
    ni.omega = 0.55;
    ni.n_side = 5;
    ni.energies = energies(2.0, 6);  // 3..8 kV, footprint escapes after bin 4
    ni.sparse = sparse;
    ni.kernel_mode = 0.15;
    ni.kernel_spread = 0.15;
    ni.noise_fraction = 0.05;
    ni.seed = 103 + sparse;
    out.push_back(ni);

    SimSpec fn;
    fn.name = sparse ? "fine-sparse-desk" : "fine-dense-desk";
    fn.material = cuw;
    fn.omega = 0.002;
    fn.n_side = 5;
    fn.energies = energies(1.5, 3);  // 2.5..4.5 kV under a 2 nm raster
    fn.sparse = sparse;
    fn.kernel_mode = 0.05;
    fn.kernel_spread = 0.04;
    fn.noise_fraction = 0.05;
    fn.seed = 105 + sparse;
    out.push_back(fn);
  }
  return out;
}

inline SimSpec find_preset(const std::string& name) {
  for (const auto& s : preset_scenarios())
    if (s.name == name) return s;
  throw config_error("unknown preset: " + name);
}

}  // namespace semtomo
