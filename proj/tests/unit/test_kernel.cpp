#include <catch2/catch_amalgamated.hpp>

#include <semtomo/kernel.hpp>

#include <cmath>
#include <vector>

using namespace semtomo;

namespace {

Grid three_bin_grid() { return Grid::with_depths(1.0, 3, {1.0, 2.0, 3.0}, {0.3, 0.7, 1.2}); }

}  // namespace

TEST_CASE("folded shape and densities against hand-computed values") {
  // z=1, amplitude=1, mode=1, spread=1: exp(0) + exp(-2)
  CHECK(folded_shape(1.0, 1.0, 1.0, 1.0) == Catch::Approx(1.1353352832366127).epsilon(1e-15));
  CHECK(folded_shape(0.0, 2.0, 0.7, 0.5) ==
        Catch::Approx(2.0 * 2.0 * std::exp(-0.5 * 1.96)).epsilon(1e-14));

  // half-normal at the origin: 2 / sqrt(2 pi)
  CHECK(folded_normal_pdf(0.0, 0.0, 1.0) == Catch::Approx(0.7978845608028654).epsilon(1e-15));
  CHECK(log_folded_normal_pdf(0.0, 0.0, 1.0) ==
        Catch::Approx(-0.22579135264472744).epsilon(1e-12));
  CHECK(folded_normal_pdf(-0.1, 0.0, 1.0) == 0.0);
  CHECK(std::isinf(log_folded_normal_pdf(-0.1, 0.0, 1.0)));

  const double x = 1.2, m = 0.7, s = 0.9;
  const double direct = (std::exp(-0.5 * (x - m) * (x - m) / (s * s)) +
                         std::exp(-0.5 * (x + m) * (x + m) / (s * s))) /
                        (s * sqrt_two_pi);
  CHECK(folded_normal_pdf(x, m, s) == Catch::Approx(direct).epsilon(1e-14));
  CHECK(log_folded_normal_pdf(x, m, s) == Catch::Approx(std::log(direct)).epsilon(1e-12));
  // folding: pdf is even in the mean
  CHECK(folded_normal_pdf(x, -m, s) == Catch::Approx(folded_normal_pdf(x, m, s)).epsilon(1e-15));
}

TEST_CASE("kernel rescaling to a measured surface value") {
  KernelVector k{{4.0, 2.0, 1.0}};
  const KernelVector out = normalized(k, 1.3);
  CHECK(out.bins == std::vector<double>{1.3, 0.65, 0.325});
  // applying it twice with the same measurement is a no-op
  const KernelVector again = normalized(out, 1.3);
  CHECK(again.bins == out.bins);

  CHECK_THROWS_AS(normalized(KernelVector{}, 1.0), config_error);
  CHECK_THROWS_AS(normalized(KernelVector{{0.0, 1.0}}, 1.0), config_error);
  CHECK_THROWS_AS(normalized(k, 0.0), config_error);
  CHECK_THROWS_AS(normalized(k, -2.0), config_error);
}

TEST_CASE("surface tie between mode depth and spread") {
  // solve_mode_depth makes eval(0) reproduce the measured surface
  for (double q : {0.6, 1.0, 2.5}) {
    for (double s : {0.2, 1.0, 3.0}) {
      const double eta0 = 0.9 * q;  // feasible: 2q/eta0 > 1
      const ParametricKernel pk = make_parametric_from_spread(q, s, eta0);
      CHECK(pk.eval(0.0) == Catch::Approx(eta0).epsilon(1e-12));
      CHECK(pk.mode_depth ==
            Catch::Approx(s * std::sqrt(2.0 * std::log(2.0 * q / eta0))).epsilon(1e-14));
    }
  }
  // boundary: 2*amplitude == surface forces the mode to the surface
  CHECK(solve_mode_depth(0.5, 1.0, 1.0) == 0.0);
  CHECK_THROWS_AS(solve_mode_depth(0.4, 1.0, 1.0), config_error);
  CHECK_THROWS_AS(solve_mode_depth(1.0, 0.0, 1.0), config_error);
  CHECK_THROWS_AS(solve_mode_depth(1.0, 1.0, 0.0), config_error);

  // solve_spread inverts solve_mode_depth
  for (double q : {0.7, 1.3}) {
    for (double mode : {0.1, 0.8, 2.0}) {
      const double eta0 = 1.1;
      if (2.0 * q / eta0 <= 1.0) continue;
      const auto pk = make_parametric_from_mode(q, mode, eta0);
      REQUIRE(pk.has_value());
      CHECK(pk->eval(0.0) == Catch::Approx(eta0).epsilon(1e-12));
      CHECK(solve_mode_depth(q, pk->spread, eta0) == Catch::Approx(mode).epsilon(1e-12));
    }
  }
  CHECK_FALSE(solve_spread(0.5, 1.0, 1.0).has_value());   // ratio == 1
  CHECK_FALSE(solve_spread(0.4, 1.0, 1.0).has_value());   // ratio < 1
  CHECK_FALSE(solve_spread(1.0, -0.1, 1.0).has_value());  // negative mode
  CHECK_FALSE(solve_spread(1.0, 1.0, 0.0).has_value());
  CHECK_FALSE(make_parametric_from_mode(0.5, 1.0, 1.0).has_value());
}

TEST_CASE("parametric discretization samples the depth levels") {
  const Grid g = three_bin_grid();
  const ParametricKernel pk = make_parametric_from_spread(1.4, 0.6, 1.0);
  const KernelVector k = pk.discretize(g);
  REQUIRE(k.size() == 3);
  CHECK(k.bins[0] == Catch::Approx(1.0).epsilon(1e-12));  // depth(0) = 0, the surface tie
  CHECK(k.bins[1] == pk.eval(0.3));
  CHECK(k.bins[2] == pk.eval(0.7));
}

TEST_CASE("parametric prior is the product of folded-normal factors") {
  ParametricPriorHyper h;
  h.amplitude_mean = 1.2;
  h.amplitude_sd = 0.4;
  h.spread_mean = 0.8;
  h.spread_sd = 0.3;
  const double lp = parametric_log_prior(1.5, 0.9, h);
  CHECK(lp == Catch::Approx(log_folded_normal_pdf(1.5, 1.2, 0.4) +
                            log_folded_normal_pdf(0.9, 0.8, 0.3))
                  .epsilon(1e-15));
}

TEST_CASE("free-kernel prior spread solves the surface-density condition") {
  const Grid g = three_bin_grid();
  const double surface = 1.0, q = 1.3, mode = 0.5;
  const FreeKernelPrior p = FreeKernelPrior::solve(g, surface, q, mode);
  REQUIRE(p.spread > 0.0);

  auto density = [&](double s) {
    return folded_normal_pdf(surface, folded_shape(g.depth(1), q, mode, s), s);
  };
  CHECK(density(p.spread) == Catch::Approx(1.0).epsilon(1e-9));

  // largest root: the density stays below 1 everywhere past the solution
  for (int j = 0; j <= 60; ++j) {
    const double s = p.spread * 1.05 * std::pow(1e8 / (p.spread * 1.05), j / 60.0);
    CHECK(density(s) < 1.0);
  }

  REQUIRE(static_cast<int>(p.prior_mean.size()) == g.n_eng());
  for (int k = 1; k <= g.n_eng(); ++k)
    CHECK(p.prior_mean[k - 1] == folded_shape(g.depth(k), q, mode, p.spread));

  KernelVector kv{{0.9, 0.7, 0.4}};
  double lp = 0.0;
  for (int j = 0; j < 3; ++j)
    lp += log_folded_normal_pdf(kv.bins[j], p.prior_mean[j], p.spread);
  CHECK(p.log_prior(kv) == Catch::Approx(lp).epsilon(1e-15));
  CHECK_THROWS_AS(p.log_prior(KernelVector{{1.0, 1.0}}), config_error);

  CHECK_THROWS_AS(FreeKernelPrior::solve(g, -1.0, q, mode), config_error);
  CHECK_THROWS_AS(FreeKernelPrior::solve(g, surface, 0.0, mode), config_error);
  CHECK_THROWS_AS(FreeKernelPrior::solve(g, surface, q, -0.2), config_error);
  // a surface value no spread can reach density 1 at
  CHECK_THROWS_AS(FreeKernelPrior::solve(g, 1e6, q, mode), config_error);

  // the non-throwing form agrees with solve when feasible and reports
  // infeasibility as empty
  const auto t = FreeKernelPrior::try_solve(g, surface, q, mode);
  REQUIRE(t.has_value());
  CHECK(t->spread == p.spread);
  CHECK(t->prior_mean == p.prior_mean);
  double max_f = 0.0;
  CHECK_FALSE(FreeKernelPrior::try_solve(g, 1e6, q, mode, &max_f).has_value());
  CHECK(max_f < 0.0);  // density never reaches 1
}

TEST_CASE("seed kernel follows the wide reference shape rescaled to the surface") {
  const Grid g = three_bin_grid();
  const KernelVector k = seed_kernel(g, 0.8);
  REQUIRE(k.size() == 3);
  const double g1 = folded_shape(g.depth(1), 1.0, 5.0, 5.0);
  CHECK(k.bins[0] == Catch::Approx(0.8).epsilon(1e-14));
  CHECK(k.bins[1] == Catch::Approx(folded_shape(g.depth(2), 1.0, 5.0, 5.0) * 0.8 / g1)
                         .epsilon(1e-15));
  CHECK(k.bins[2] == Catch::Approx(folded_shape(g.depth(3), 1.0, 5.0, 5.0) * 0.8 / g1)
                         .epsilon(1e-15));
  CHECK_THROWS_AS(seed_kernel(g, 0.0), config_error);
}
