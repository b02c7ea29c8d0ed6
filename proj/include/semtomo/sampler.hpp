#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "semtomo/errors.hpp"
#include "semtomo/kernel.hpp"
#include "semtomo/posterior.hpp"
#include "semtomo/rng.hpp"
#include "semtomo/sparsity.hpp"

namespace semtomo {

// Streaming moment accumulator (Welford); variance is the population variance
// of everything added so far.
struct AdaptAccum {
  long long count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++count;
    const double d = x - mean;
    mean += d / count;
    m2 += d * (x - mean);
  }
  double variance() const { return count > 0 ? m2 / count : 0.0; }
  double sd() const { return std::sqrt(std::max(0.0, variance())); }
};

struct SamplerConfig {
  long n_max = 100000;  // total sweeps
  long burn_in = 50000;
  long n0 = 10000;  // sweep from which per-voxel history is accumulated
  long thin = 100;  // trace stride, in sweeps
  std::uint64_t seed = 1;

  bool update_field = true;
  bool update_kernel = true;
  bool update_p = true;

  // Before adaptation kicks in (or when the history variance is zero) the
  // random-walk scale is a fresh U(0,1] multiple of max(seed value, floor).
  double pre_sd_floor = 1e-3;

  // Independence proposals need the proposal-density ratio in the acceptance
  // probability; this switch exists so its effect stays testable.
  bool hastings_correction = true;

  enum class KernelModel { parametric, free };
  enum class KernelMoves { joint, scan };
  KernelModel kernel_model = KernelModel::free;
  KernelMoves kernel_moves = KernelMoves::joint;

  double kernel_surface = 1.0;  // measured surface response, fixes bin 0

  // free-kernel prior shape hyperparameters (seed values; 0 = derive from data
  // scale) and their uniform hyperprior ranges.  The hypers carry uniform
  // priors and are sampled alongside the kernel unless update_kernel_hypers is
  // off, which freezes the prior at the seed shape.
  bool update_kernel_hypers = true;
  double free_amplitude = 0.0;      // 0 -> kernel_surface / 2
  double free_mode_depth = 0.0;
  double free_amplitude_max = 0.0;  // 0 -> 10 * kernel_surface
  double free_mode_max = 0.0;       // 0 -> deepest depth level

  // parametric hyperpriors and walk widths; 0 = derive from data scale
  double par_amplitude_mean = 0.0;  // 0 -> kernel_surface
  double par_amplitude_sd = 0.0;    // 0 -> mean
  double par_spread_mean = 0.0;     // 0 -> h(1)
  double par_spread_sd = 0.0;       // 0 -> mean
  double par_q_walk = 0.0;          // 0 -> 0.05 * kernel_surface
  double par_mode_walk = 0.0;       // 0 -> 0.25 * h(1)

  double p_seed = p_seed_default;
  double p_halfwidth = p_walk_halfwidth;
  PSupport p_support;

  void validate() const {
    if (n_max < 1) throw config_error("sampler: n_max must be >= 1");
    if (burn_in < 0 || burn_in >= n_max) throw config_error("sampler: need 0 <= burn_in < n_max");
    if (n0 < 0 || n0 >= n_max) throw config_error("sampler: need 0 <= n0 < n_max");
    if (thin < 1) throw config_error("sampler: thin must be >= 1");
    if (!(pre_sd_floor > 0.0)) throw config_error("sampler: pre_sd_floor must be > 0");
    if (!(kernel_surface > 0.0)) throw config_error("sampler: kernel_surface must be > 0");
    if (!(p_support.hi > p_support.lo)) throw config_error("sampler: empty p support");
    if (!(p_seed >= p_support.lo && p_seed <= p_support.hi))
      throw config_error("sampler: p_seed outside support");
    if (!(p_halfwidth > 0.0)) throw config_error("sampler: p_halfwidth must be > 0");
    if (free_amplitude < 0.0 || free_mode_depth < 0.0 || free_amplitude_max < 0.0 ||
        free_mode_max < 0.0 || par_amplitude_mean < 0.0 || par_amplitude_sd < 0.0 ||
        par_spread_mean < 0.0 || par_spread_sd < 0.0 || par_q_walk < 0.0 ||
        par_mode_walk < 0.0)
      throw config_error("sampler: kernel hyperparameters must be >= 0");
  }
};

// Sampled kernel-shape parameters.  Parametric model: amplitude and spread are
// free, the mode depth is tied to them through the fixed surface value.  Free
// model: the prior-shape hyperparameters (amplitude, mode depth) with the
// prior spread solved from the surface-density condition.
struct KernelParams {
  double amplitude = 0.0;
  double spread = 0.0;
  double mode_depth = 0.0;
};

// Kernel-model context resolved against a grid: seed kernel, priors, walk
// widths.  Built once per run; the state that moves lives in ChainState.
struct KernelContext {
  SamplerConfig::KernelModel model = SamplerConfig::KernelModel::free;
  double surface = 1.0;
  KernelVector seed;  // also sets the independence-proposal scales
  FreeKernelPrior free_prior;  // seed prior; running hypers live in ChainState::kpar
  std::vector<double> prior_depths;  // abscissas of the free-prior means
  double amp_max = 0.0, mode_max = 0.0;  // uniform hyperprior supports
  double hyper_amp_rate = 0.0, hyper_mode_rate = 0.0;  // independence-jump rates
  double hyper_amp_walk = 0.0, hyper_mode_walk = 0.0;  // folded-walk scales
  ParametricPriorHyper par_hyper;
  double q_walk = 0.0;
  double mode_walk = 0.0;

  // Free-model kernel prior under the hypers in kp (kp.spread must hold the
  // solved prior spread for (kp.amplitude, kp.mode_depth)).
  double free_log_prior(const KernelVector& k, const KernelParams& kp) const {
    if (k.size() != static_cast<int>(prior_depths.size()))
      throw config_error("free prior: kernel size mismatch");
    double lp = 0.0;
    for (int j = 0; j < k.size(); ++j) {
      const double m = folded_shape(prior_depths[j], kp.amplitude, kp.mode_depth, kp.spread);
      lp += log_folded_normal_pdf(k.bins[j], m, kp.spread);
    }
    return lp;
  }

  double log_prior(const KernelVector& k, const KernelParams& kp) const {
    if (model == SamplerConfig::KernelModel::free) return free_log_prior(k, kp);
    return parametric_log_prior(kp.amplitude, kp.spread, par_hyper);
  }
};

inline KernelContext make_kernel_context(const Grid& g, const SamplerConfig& cfg) {
  KernelContext ctx;
  ctx.model = cfg.kernel_model;
  ctx.surface = cfg.kernel_surface;
  ctx.seed = seed_kernel(g, ctx.surface);
  if (ctx.model == SamplerConfig::KernelModel::free) {
    const double amp = cfg.free_amplitude > 0.0 ? cfg.free_amplitude : 0.5 * ctx.surface;
    ctx.free_prior = FreeKernelPrior::solve(g, ctx.surface, amp, cfg.free_mode_depth);
    ctx.prior_depths.resize(g.n_eng());
    for (int k = 1; k <= g.n_eng(); ++k) ctx.prior_depths[k - 1] = g.depth(k);
    ctx.amp_max =
        cfg.free_amplitude_max > 0.0 ? cfg.free_amplitude_max : 10.0 * ctx.surface;
    ctx.mode_max = cfg.free_mode_max > 0.0 ? cfg.free_mode_max : g.depth(g.n_eng());
    if (amp > ctx.amp_max || cfg.free_mode_depth > ctx.mode_max)
      throw config_error("sampler: free-prior seed hypers outside their uniform support");
    ctx.hyper_amp_rate = 2.0 / ctx.amp_max;  // independence-jump means = mid-range
    ctx.hyper_mode_rate = 2.0 / ctx.mode_max;
    ctx.hyper_amp_walk = ctx.amp_max / 50.0;
    ctx.hyper_mode_walk = ctx.mode_max / 50.0;
  } else {
    ctx.par_hyper.amplitude_mean =
        cfg.par_amplitude_mean > 0.0 ? cfg.par_amplitude_mean : ctx.surface;
    ctx.par_hyper.amplitude_sd =
        cfg.par_amplitude_sd > 0.0 ? cfg.par_amplitude_sd : ctx.par_hyper.amplitude_mean;
    ctx.par_hyper.spread_mean = cfg.par_spread_mean > 0.0 ? cfg.par_spread_mean : g.depth(1);
    ctx.par_hyper.spread_sd =
        cfg.par_spread_sd > 0.0 ? cfg.par_spread_sd : ctx.par_hyper.spread_mean;
    ctx.q_walk = cfg.par_q_walk > 0.0 ? cfg.par_q_walk : 0.05 * ctx.surface;
    ctx.mode_walk = cfg.par_mode_walk > 0.0 ? cfg.par_mode_walk : 0.25 * g.depth(1);
  }
  return ctx;
}

struct ChainState {
  long iteration = 0;  // completed sweeps
  Rng rng;
  DensityField seed_field;       // pre-adaptation proposal scales
  std::vector<AdaptAccum> accum;  // per voxel, field storage order
  KernelParams kpar;              // kernel shape params / free-prior hypers

  long field_props = 0, field_accs = 0;
  long kernel_props = 0, kernel_accs = 0;
  long hyper_props = 0, hyper_accs = 0;
  long p_props = 0, p_accs = 0;
  double max_audit_cell = 0.0;
  double max_audit_drift = 0.0;
};

/// Density seed: invert the per-column cumulative seed-kernel response, so a
// flat column reproducing the data would start near the right scale.
inline DensityField seed_density(const ImageStack& stack, const Grid& g,
                                 const KernelVector& seed_kern) {
  DensityField f(g.n_data(), g.n_eng());
  std::vector<double> phi(g.n_eng() + 1, 0.0);
  for (int k = 1; k <= g.n_eng(); ++k)
    phi[k] = phi[k - 1] + seed_kern.bins[k - 1] * g.bin_width(k);
  for (int i = 1; i <= g.n_data(); ++i)
    for (int k = 1; k <= g.n_eng(); ++k)
      f.at(i, k) = std::max(0.0, stack.data.at(i, k)) / phi[k];
  return f;
}

// Initialize engine + chain state at the seed point.
inline void seed_state(PosteriorEngine& eng, ChainState& st, const KernelContext& ctx,
                       const SamplerConfig& cfg) {
  const Grid& g = eng.grid();
  KernelVector kern = ctx.seed;
  KernelParams kp;
  if (ctx.model == SamplerConfig::KernelModel::parametric) {
    kp.amplitude = std::max(ctx.par_hyper.amplitude_mean, ctx.surface);
    kp.spread = ctx.par_hyper.spread_mean;
    kp.mode_depth = solve_mode_depth(kp.amplitude, kp.spread, ctx.surface);
    ParametricKernel pk{kp.amplitude, kp.mode_depth, kp.spread, ctx.surface};
    kern = pk.discretize(g);
  } else {
    kp.amplitude = ctx.free_prior.amplitude;
    kp.spread = ctx.free_prior.spread;
    kp.mode_depth = ctx.free_prior.mode_depth;
  }
  st.iteration = 0;
  st.rng = Rng(cfg.seed);
  st.seed_field = seed_density(eng.stack(), g, ctx.seed);
  st.accum.assign(static_cast<std::size_t>(g.n_data()) * g.n_eng(), AdaptAccum{});
  st.kpar = kp;
  st.field_props = st.field_accs = st.kernel_props = st.kernel_accs = 0;
  st.hyper_props = st.hyper_accs = 0;
  st.p_props = st.p_accs = 0;
  st.max_audit_cell = st.max_audit_drift = 0.0;
  DensityField f = st.seed_field;
  eng.set_state(std::move(f), kern, ctx.log_prior(kern, kp), cfg.p_seed);
}

namespace detail {

template <class AcceptFn>
void kernel_block(PosteriorEngine& eng, ChainState& st, const KernelContext& ctx,
                  const SamplerConfig& cfg, AcceptFn&& accept_log) {
  const int ne = eng.grid().n_eng();
  if (ctx.model == SamplerConfig::KernelModel::parametric) {
    // symmetric folded random walk on (amplitude, mode depth); the spread is
    // re-derived from the surface tie, infeasible proposals are rejected
    const double q = st.rng.folded_normal(st.kpar.amplitude, ctx.q_walk);
    const double md = st.rng.folded_normal(st.kpar.mode_depth, ctx.mode_walk);
    ++st.kernel_props;
    auto pk = make_parametric_from_mode(q, md, ctx.surface);
    if (!pk) return;
    const KernelVector prop = pk->discretize(eng.grid());
    const double delta = eng.try_kernel(prop, parametric_log_prior(q, pk->spread, ctx.par_hyper));
    if (accept_log(delta)) {
      eng.accept();
      st.kpar = KernelParams{q, pk->spread, md};
      ++st.kernel_accs;
    } else {
      eng.reject();
    }
    return;
  }
  // free model: exponential independence proposals scaled by the seed kernel;
  // bin 0 is the measured surface value and never moves
  auto propose_bins = [&](int lo, int hi) {
    KernelVector prop = eng.kernel();
    double hast = 0.0;
    for (int j = lo; j <= hi; ++j) {
      const double rate = 1.0 / ctx.seed.bins[j];
      const double y = st.rng.exponential(rate);
      hast += rate * (y - prop.bins[j]);  // log q(cur)/q(prop)
      prop.bins[j] = y;
    }
    ++st.kernel_props;
    const double delta = eng.try_kernel(prop, ctx.free_log_prior(prop, st.kpar));
    if (accept_log(delta + (cfg.hastings_correction ? hast : 0.0))) {
      eng.accept();
      ++st.kernel_accs;
    } else {
      eng.reject();
    }
  };
  if (ne < 2) return;
  if (cfg.kernel_moves == SamplerConfig::KernelMoves::joint) {
    propose_bins(1, ne - 1);
  } else {
    for (int j = 1; j < ne; ++j) propose_bins(j, j);
  }

  // prior-shape hyperparameters: uniform hyperpriors explored by a symmetric
  // folded walk (local) plus an exponential independence jump (global) each
  // sweep; the prior spread is re-solved per proposal.  The kernel itself
  // does not move, so only the kernel-prior term enters the ratio.
  if (!cfg.update_kernel_hypers) return;
  auto hyper_move = [&](double q, double md, double hast) {
    ++st.hyper_props;
    if (!(q > 0.0) || q > ctx.amp_max || md > ctx.mode_max) return;
    const auto prior = FreeKernelPrior::try_solve(eng.grid(), ctx.surface, q, md);
    if (!prior) return;
    const double delta = eng.try_kernel(eng.kernel(), prior->log_prior(eng.kernel()));
    if (accept_log(delta + (cfg.hastings_correction ? hast : 0.0))) {
      eng.accept();
      st.kpar = KernelParams{q, prior->spread, md};
      ++st.hyper_accs;
    } else {
      eng.reject();
    }
  };
  {
    const double q = st.rng.folded_normal(st.kpar.amplitude, ctx.hyper_amp_walk);
    const double md = st.rng.folded_normal(st.kpar.mode_depth, ctx.hyper_mode_walk);
    hyper_move(q, md, 0.0);
  }
  {
    const double q = st.rng.exponential(ctx.hyper_amp_rate);
    const double md = st.rng.exponential(ctx.hyper_mode_rate);
    hyper_move(q, md, ctx.hyper_amp_rate * (q - st.kpar.amplitude) +
                          ctx.hyper_mode_rate * (md - st.kpar.mode_depth));
  }
}

}  // namespace detail

// One Gibbs sweep: every density voxel (pointing-major), then the kernel
// block, then p, each by Metropolis with the move-specific proposal.
inline void mwg_step(PosteriorEngine& eng, ChainState& st, const KernelContext& ctx,
                     const SamplerConfig& cfg) {
  const Grid& g = eng.grid();
  const int nd = g.n_data(), ne = g.n_eng();
  auto accept_log = [&](double delta) {
    if (delta >= 0.0) return true;
    return std::log(st.rng.uniform_open01()) < delta;
  };

  if (cfg.update_field) {
    for (int i = 1; i <= nd; ++i)
      for (int m = 1; m <= ne; ++m) {
        const std::size_t idx = static_cast<std::size_t>(i - 1) * ne + (m - 1);
        double sd = 0.0;
        if (st.iteration >= cfg.n0) sd = st.accum[idx].sd();
        if (!(sd > 0.0))
          sd = st.rng.uniform_open01() * std::max(st.seed_field.values[idx], cfg.pre_sd_floor);
        const double prop = st.rng.folded_normal(eng.field().values[idx], sd);
        ++st.field_props;
        const double delta = eng.try_voxel(i, m, prop);
        if (accept_log(delta)) {
          eng.accept();
          ++st.field_accs;
        } else {
          eng.reject();
        }
      }
  }

  if (cfg.update_kernel) detail::kernel_block(eng, st, ctx, cfg, accept_log);

  if (cfg.update_p) {
    const double prop = reflect_into(
        eng.p() + st.rng.uniform(-cfg.p_halfwidth, cfg.p_halfwidth), eng.p_support().lo,
        eng.p_support().hi);
    ++st.p_props;
    const double delta = eng.try_p(prop);
    if (accept_log(delta)) {
      eng.accept();
      ++st.p_accs;
    } else {
      eng.reject();
    }
  }

  ++st.iteration;
  if (st.iteration >= cfg.n0)
    for (std::size_t j = 0; j < st.accum.size(); ++j) st.accum[j].add(eng.field().values[j]);
}

// Run sweeps until n_max.  At every thin-th sweep the caches are re-audited
// (so emitted totals come from a scratch recompute, which keeps traces and
// resumed runs bit-identical) and on_trace fires.
inline void run_chain(
    PosteriorEngine& eng, ChainState& st, const KernelContext& ctx, const SamplerConfig& cfg,
    const std::function<void(const PosteriorEngine&, const ChainState&)>& on_trace = {}) {
  cfg.validate();
  while (st.iteration < cfg.n_max) {
    mwg_step(eng, st, ctx, cfg);
    if (st.iteration % cfg.thin == 0) {
      const auto rep = eng.audit();
      st.max_audit_cell = std::max(st.max_audit_cell, rep.max_cell);
      st.max_audit_drift =
          std::max({st.max_audit_drift, rep.lik_total_drift, rep.prior_total_drift});
      if (on_trace) on_trace(eng, st);
    }
  }
}

// ---------------------------------------------------------------------------
// Posterior summaries.

struct HpdInterval {
  double lo = 0.0;
  double hi = 0.0;
};

// Narrowest window containing ceil(mass * n) consecutive order statistics.
inline HpdInterval hpd_interval(std::vector<double> xs, double mass) {
  if (xs.empty()) throw data_error("hpd_interval: no samples");
  if (!(mass > 0.0 && mass <= 1.0)) throw config_error("hpd_interval: mass must be in (0, 1]");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  auto m = static_cast<std::size_t>(std::ceil(mass * static_cast<double>(n) - 1e-9));
  m = std::clamp<std::size_t>(m, 1, n);
  std::size_t best = 0;
  double bw = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j + m <= n; ++j) {
    const double w = xs[j + m - 1] - xs[j];
    if (w < bw) {
      bw = w;
      best = j;
    }
  }
  return {xs[best], xs[best + m - 1]};
}

struct ColumnSummary {
  double mean = 0.0;
  double sd = 0.0;  // population sd over the retained samples
  double median = 0.0;
  double hpd_lo = 0.0;
  double hpd_hi = 0.0;
};

// two-sample Kolmogorov-Smirnov distance, sup |F_a - F_b|
inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw data_error("ks_statistic: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t ia = 0, ib = 0;
  double d = 0.0;
  while (ia < a.size() && ib < b.size()) {
    const double x = std::min(a[ia], b[ib]);
    while (ia < a.size() && a[ia] <= x) ++ia;
    while (ib < b.size() && b[ib] <= x) ++ib;
    d = std::max(d, std::abs(static_cast<double>(ia) / na - static_cast<double>(ib) / nb));
  }
  return d;
}

inline ColumnSummary summarize_column(const std::vector<double>& xs, double mass = 0.95) {
  if (xs.empty()) throw data_error("summarize_column: no samples");
  AdaptAccum acc;
  for (double x : xs) acc.add(x);
  std::vector<double> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median =
      n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  const HpdInterval h = hpd_interval(xs, mass);
  return {acc.mean, acc.sd(), median, h.lo, h.hi};
}

}  // namespace semtomo
