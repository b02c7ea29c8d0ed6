#include <catch2/catch_amalgamated.hpp>

#include <semtomo/projection.hpp>
#include <semtomo/rng.hpp>

#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

using namespace semtomo;
using namespace oracle;

// ---------------------------------------------------------------------------

TEST_CASE("depth convolution spot values") {
  DensityField f(1, 2);
  f.at(1, 1) = 2.0;
  f.at(1, 2) = 3.0;
  KernelVector k;
  k.bins = {1.0, 0.5};
  CHECK(convolve(f, k, 1, 2) == 4.0);  // 2*0.5 + 3*1
  CHECK(convolve(f, k, 1, 1) == 2.0);
  DensityField z(1, 2);
  CHECK(convolve(z, k, 1, 2) == 0.0);
}

TEST_CASE("coarse projection equals the ring transcription") {
  Rng rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const Grid g = random_coarse_grid(rng);
    REQUIRE(classify_regime(g).cls == ResolutionClass::coarse);
    const Projector proj(g);
    const DensityField f = random_field(g, rng);
    const KernelVector kern = random_kernel(g.n_eng(), rng);
    for (int i = 1; i <= g.n_data(); ++i)
      for (int k = 1; k <= g.n_eng(); ++k) {
        const double got = proj.project_cell(f, kern, i, k);
        const double want = model1_ref(g, f, kern.bins, i, k);
        CHECK(std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want)));
      }
  }
}

TEST_CASE("single-bin projection closes to h c kappa / 2") {
  const Grid g = Grid::with_depths(1.0, 1, {5.0}, {0.3});
  const Projector proj(g);
  DensityField f(1, 1);
  f.at(1, 1) = 1.7;
  KernelVector kern;
  kern.bins = {0.9};
  CHECK(proj.project_cell(f, kern, 1, 1) ==
        Catch::Approx(0.3 * 1.7 * 0.9 / 2.0).epsilon(1e-14));
}

TEST_CASE("mixed projection equals the neighbour-enumeration reference") {
  Rng rng(515);
  for (int trial = 0; trial < 50; ++trial) {
    int k_in = 0;
    const Grid g = random_mixed_grid(rng, k_in);
    const ResolutionRegime r = classify_regime(g);
    REQUIRE(r.cls == ResolutionClass::mixed);
    REQUIRE(r.k_in == k_in);
    const Projector proj(g);
    const DensityField f = random_field(g, rng);
    const KernelVector kern = random_kernel(g.n_eng(), rng);
    for (int i = 1; i <= g.n_data(); ++i)
      for (int k = 1; k <= g.n_eng(); ++k) {
        const double got = proj.project_cell(f, kern, i, k);
        const double want = model2_ref(g, f, kern.bins, i, k, k_in);
        CHECK(std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want)));
      }
  }
}

TEST_CASE("mixed projection of a uniform field matches the coarse value") {
  Rng rng(77);
  int k_in = 0;
  const Grid g = random_mixed_grid(rng, k_in);
  const Projector proj(g);
  DensityField f(g.n_data(), g.n_eng());
  for (double& v : f.values) v = 0.63;
  const KernelVector kern = random_kernel(g.n_eng(), rng);
  for (int i = 1; i <= g.n_data(); ++i)
    for (int k = 1; k <= g.n_eng(); ++k)
      CHECK(proj.project_cell(f, kern, i, k) ==
            Catch::Approx(model1_ref(g, f, kern.bins, i, k)).epsilon(1e-12));
}

TEST_CASE("fine projection matches Monte-Carlo slab integration") {
  Rng rng(31);
  const Grid g = Grid::with_depths(0.1, 5, {1.0, 2.0, 3.0}, {0.24, 0.51, 0.87});
  REQUIRE(classify_regime(g).cls == ResolutionClass::fine);
  const Projector proj(g);
  const DensityField f = random_field(g, rng, 0.2, 1.2);
  const KernelVector kern = random_kernel(g.n_eng(), rng);
  Rng mc(999);
  for (int i : {1, 7, 13, 25})
    for (int k = 1; k <= g.n_eng(); ++k) {
      const double got = proj.project_cell(f, kern, i, k);
      const double want = model3_mc(g, f, kern, i, k, 150000, mc);
      CHECK(std::abs(got - want) <= 0.02 * std::abs(want));
    }
}

TEST_CASE("fine path run on contained hemispheres reproduces the coarse value") {
  Rng rng(88);
  const Grid g = random_coarse_grid(rng);  // every disc inside its own pixel
  const Projector fine_path(g, ResolutionRegime{ResolutionClass::fine, 0});
  const DensityField f = random_field(g, rng);
  const KernelVector kern = random_kernel(g.n_eng(), rng);
  for (int i = 1; i <= g.n_data(); ++i)
    for (int k = 1; k <= g.n_eng(); ++k)
      CHECK(fine_path.project_cell(f, kern, i, k) ==
            Catch::Approx(model1_ref(g, f, kern.bins, i, k)).epsilon(1e-9));
}

TEST_CASE("fine path on laterally uniform fields collapses to the coarse chain") {
  Rng rng(89);
  const Grid g = Grid::with_depths(0.2, 4, {1.0, 2.0}, {0.5, 1.1});
  REQUIRE(classify_regime(g).cls == ResolutionClass::fine);
  const Projector proj(g);
  DensityField f(g.n_data(), g.n_eng());
  std::vector<double> per_depth{0.8, 0.15};
  for (int i = 1; i <= g.n_data(); ++i)
    for (int m = 1; m <= g.n_eng(); ++m) f.at(i, m) = per_depth[static_cast<std::size_t>(m - 1)];
  const KernelVector kern = random_kernel(g.n_eng(), rng);
  for (int i = 1; i <= g.n_data(); ++i)
    for (int k = 1; k <= g.n_eng(); ++k)
      CHECK(proj.project_cell(f, kern, i, k) ==
            Catch::Approx(model1_ref(g, f, kern.bins, i, k)).epsilon(1e-12));
}

TEST_CASE("projection is linear and monotone in the field") {
  Rng rng(4242);
  const std::vector<Projector> projs = [] {
    Rng r(606);
    int k_in = 0;
    std::vector<Projector> out;
    out.emplace_back(random_coarse_grid(r));
    out.emplace_back(random_mixed_grid(r, k_in));
    out.emplace_back(Grid::with_depths(0.15, 4, {1.0, 2.0}, {0.3, 0.8}));
    return out;
  }();
  for (const Projector& proj : projs) {
    const Grid& g = proj.grid();
    const DensityField f = random_field(g, rng);
    const KernelVector kern = random_kernel(g.n_eng(), rng);
    const ProjectionMatrix base = proj.project_all(f, kern);

    DensityField scaled = f;
    for (double& v : scaled.values) v *= 3.5;
    const ProjectionMatrix ps = proj.project_all(scaled, kern);
    for (std::size_t j = 0; j < base.values.size(); ++j)
      CHECK(ps.values[j] == Catch::Approx(3.5 * base.values[j]).epsilon(1e-12));

    DensityField bumped = f;
    const int i0 = 1 + static_cast<int>(rng.uniform01() * g.n_data());
    const int m0 = 1 + static_cast<int>(rng.uniform01() * g.n_eng());
    bumped.at(i0, m0) += 0.7;
    const ProjectionMatrix pb = proj.project_all(bumped, kern);
    for (std::size_t j = 0; j < base.values.size(); ++j)
      CHECK(pb.values[j] >= base.values[j] - 1e-15);
  }
}

TEST_CASE("projections of uniform fields are nondecreasing in energy") {
  Rng rng(11);
  int k_in = 0;
  for (const Grid& g : {random_coarse_grid(rng), random_mixed_grid(rng, k_in),
                        Grid::with_depths(0.15, 4, {1.0, 2.0, 3.0}, {0.3, 0.8, 1.2})}) {
    const Projector proj(g);
    DensityField f(g.n_data(), g.n_eng());
    for (double& v : f.values) v = 1.0;
    const KernelVector kern = random_kernel(g.n_eng(), rng);
    const ProjectionMatrix p = proj.project_all(f, kern);
    for (int i = 1; i <= g.n_data(); ++i)
      for (int k = 2; k <= g.n_eng(); ++k) CHECK(p.at(i, k) >= p.at(i, k - 1) - 1e-15);
  }
}

TEST_CASE("zero fields project to zero and support propagates") {
  Rng rng(21);
  int k_in = 0;
  for (const Grid& g : {random_coarse_grid(rng), random_mixed_grid(rng, k_in),
                        Grid::with_depths(0.15, 4, {1.0, 2.0}, {0.3, 0.8})}) {
    const Projector proj(g);
    KernelVector kern = random_kernel(g.n_eng(), rng);
    DensityField zero(g.n_data(), g.n_eng());
    for (double v : proj.project_all(zero, kern).values) CHECK(v == 0.0);

    DensityField spike(g.n_data(), g.n_eng());
    const int i0 = 1 + static_cast<int>(rng.uniform01() * g.n_data());
    const int m0 = 1 + static_cast<int>(rng.uniform01() * g.n_eng());
    spike.at(i0, m0) = 2.0;
    const ProjectionMatrix p = proj.project_all(spike, kern);
    const auto affected = proj.affected_cells(i0, m0);
    for (int i = 1; i <= g.n_data(); ++i)
      for (int k = 1; k <= g.n_eng(); ++k)
        if (p.at(i, k) != 0.0)
          CHECK(std::binary_search(affected.begin(), affected.end(), std::make_pair(i, k)));
  }
}

TEST_CASE("incremental re-evaluation over affected cells equals a full recompute") {
  Rng rng(5150);
  int k_in = 0;
  for (const Grid& g : {random_coarse_grid(rng), random_mixed_grid(rng, k_in),
                        Grid::with_depths(0.12, 5, {1.0, 2.0, 3.0}, {0.3, 0.65, 1.0})}) {
    const Projector proj(g);
    const KernelVector kern = random_kernel(g.n_eng(), rng);
    DensityField f = random_field(g, rng);
    ProjectionMatrix p = proj.project_all(f, kern);
    for (int rep = 0; rep < 12; ++rep) {
      const int i0 = 1 + static_cast<int>(rng.uniform01() * g.n_data());
      const int m0 = 1 + static_cast<int>(rng.uniform01() * g.n_eng());
      f.at(i0, m0) = rng.uniform01() * 2.0;
      for (const auto& [i, k] : proj.affected_cells(i0, m0))
        p.at(i, k) = proj.project_cell(f, kern, i, k);
      const ProjectionMatrix full = proj.project_all(f, kern);
      for (std::size_t j = 0; j < full.values.size(); ++j) CHECK(p.values[j] == full.values[j]);
    }
  }
}

TEST_CASE("stack decomposition removes per-plane minima exactly") {
  ImageStack s;
  s.data = CellArray(3, 1);
  s.data.at(1, 1) = 3.0;
  s.data.at(2, 1) = 5.0;
  s.data.at(3, 1) = 7.0;
  s.sigma = CellArray(3, 1, 0.1);
  decompose_low_rank(s);
  CHECK(s.baseline == std::vector<double>{3.0});
  CHECK(s.data.at(1, 1) == 0.0);
  CHECK(s.data.at(2, 1) == 2.0);
  CHECK(s.data.at(3, 1) == 4.0);
  // idempotent: second pass subtracts zero
  decompose_low_rank(s);
  CHECK(s.baseline == std::vector<double>{3.0});
  CHECK(s.data.at(2, 1) == 2.0);
  reconstruct_low_rank(s);
  CHECK(s.data.at(1, 1) == 3.0);
  CHECK_FALSE(s.baseline_removed);
}

TEST_CASE("decomposition round trip is bit exact on random stacks") {
  Rng rng(606060);
  ImageStack s;
  s.data = CellArray(25, 4);
  // unquantized draws: v - m rarely rounds back under naive re-addition, so
  // this exercises the stored rounding defects, not a lucky exact subtraction
  for (double& v : s.data.values) v = rng.uniform(0.0, 15.0) + rng.normal() * 1e-9;
  s.sigma = CellArray(25, 4, 0.5);
  const std::vector<double> before = s.data.values;
  decompose_low_rank(s);
  for (int k = 1; k <= 4; ++k) {
    double m = 1e300;
    for (int i = 1; i <= 25; ++i) m = std::min(m, s.data.at(i, k));
    CHECK(m == 0.0);
  }
  reconstruct_low_rank(s);
  CHECK(s.data.values == before);

  // mixed-sign planes with wide dynamic range round-trip too
  ImageStack w;
  w.data = CellArray(40, 3);
  for (int k = 1; k <= 3; ++k)
    for (int i = 1; i <= 40; ++i)
      w.data.at(i, k) = (rng.uniform01() - 0.5) * std::exp(rng.uniform(-9.0, 9.0));
  w.sigma = CellArray(40, 3, 1.0);
  const std::vector<double> worig = w.data.values;
  decompose_low_rank(w);
  for (int k = 1; k <= 3; ++k) {
    double m = 1e300;
    for (int i = 1; i <= 40; ++i) m = std::min(m, w.data.at(i, k));
    CHECK(m == 0.0);
  }
  reconstruct_low_rank(w);
  CHECK(w.data.values == worig);
}

TEST_CASE("constant planes decompose to zero residual") {
  ImageStack s;
  s.data = CellArray(4, 1, 2.5);
  s.sigma = CellArray(4, 1, 0.1);
  decompose_low_rank(s);
  for (double v : s.data.values) CHECK(v == 0.0);
  CHECK(s.baseline[0] == 2.5);
}

TEST_CASE("stack validation rejects malformed inputs") {
  ImageStack s;
  s.data = CellArray(4, 2, 1.0);
  s.sigma = CellArray(4, 2, 0.1);
  validate_stack(s);

  ImageStack bad_sigma = s;
  bad_sigma.sigma.at(2, 1) = 0.0;
  CHECK_THROWS_AS(validate_stack(bad_sigma), data_error);

  ImageStack bad_data = s;
  bad_data.data.at(1, 2) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(validate_stack(bad_data), data_error);

  ImageStack bad_shape = s;
  bad_shape.sigma = CellArray(4, 1, 0.1);
  CHECK_THROWS_AS(validate_stack(bad_shape), data_error);
}

TEST_CASE("projector rejects inconsistent shapes and overrides") {
  const Grid g = Grid::with_depths(1.0, 2, {1.0, 2.0}, {0.2, 0.4});
  const Projector proj(g);
  DensityField f(3, 2);
  KernelVector kern;
  kern.bins = {1.0, 0.5};
  CHECK_THROWS_AS(proj.check(f, kern), data_error);
  DensityField ok(4, 2);
  KernelVector small;
  small.bins = {1.0};
  CHECK_THROWS_AS(proj.check(ok, small), data_error);
  CHECK_THROWS_AS(Projector(g, ResolutionRegime{ResolutionClass::coarse, 1}), config_error);
  CHECK_THROWS_AS(Projector(g, ResolutionRegime{ResolutionClass::fine, 2}), config_error);
  CHECK_THROWS_AS(Projector(g, ResolutionRegime{ResolutionClass::mixed, 0}), config_error);
}
