#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "semtomo/errors.hpp"
#include "semtomo/kernel.hpp"
#include "semtomo/projection.hpp"
#include "semtomo/rng.hpp"
#include "semtomo/sparsity.hpp"

namespace semtomo {

// Noise scale attached to an intensity: a fixed fraction of its magnitude
// with a floor that keeps the likelihood finite near zero signal.
struct NoiseModel {
  double intensity_fraction = 0.05;
  double sigma_min = 1e-6;

  double sigma_for(double intensity) const {
    return std::max(intensity_fraction * std::fabs(intensity), sigma_min);
  }
};

inline double log_normal_term(double model, double datum, double sigma) {
  const double r = (model - datum) / sigma;
  return -std::log(sigma * sqrt_two_pi) - 0.5 * r * r;
}

struct PosteriorParts {
  double log_likelihood = 0.0;
  double log_field_prior = 0.0;
  double log_kernel_prior = 0.0;

  double total() const { return log_likelihood + log_field_prior + log_kernel_prior; }
};

// Staged posterior evaluation over (density field, kernel, p).
//
// Caches per cell: the projection C, its likelihood term, the decay ratio tau
// (which reads C at k and k-1), and the voxel prior term -(xi * nu(tau, p))^2.
// A try_* call stages exactly the cells its move can touch and returns the
// log-posterior change; accept() publishes the staged values, reject()
// restores the previous state.  Staged cell values are computed by the same
// project_cell path a full recompute uses, so accepted increments stay bitwise
// equal to a recompute from scratch; audit() verifies that and re-sums the
// running totals.
class PosteriorEngine {
 public:
  PosteriorEngine(Projector proj, ImageStack stack, PSupport psup = {})
      : proj_(std::move(proj)), stack_(std::move(stack)), psup_(psup) {
    validate_stack(stack_);
    if (stack_.n_data() != proj_.grid().n_data() || stack_.n_eng() != proj_.grid().n_eng())
      throw data_error("posterior: stack shape does not match the grid");
  }

  void set_state(DensityField f, KernelVector kern, double kernel_log_prior, double p) {
    proj_.check(f, kern);
    if (!(p >= psup_.lo && p <= psup_.hi)) throw config_error("posterior: p outside support");
    field_ = std::move(f);
    kern_ = std::move(kern);
    kernel_prior_ = kernel_log_prior;
    p_ = p;
    staged_ = Staged::none;
    recompute_full(field_, kern_, p_, C_, lik_, tau_, prior_, lik_total_, prior_total_);
  }

  const Grid& grid() const { return proj_.grid(); }
  const Projector& projector() const { return proj_; }
  const ImageStack& stack() const { return stack_; }
  const DensityField& field() const { return field_; }
  const KernelVector& kernel() const { return kern_; }
  const ProjectionMatrix& projections() const { return C_; }
  double p() const { return p_; }
  const PSupport& p_support() const { return psup_; }
  double tau(int i, int k) const { return tau_.at(i, k); }

  PosteriorParts parts() const {
    return {lik_total_, prior_total_, kernel_prior_};
  }
  double log_posterior() const { return parts().total(); }

  // --- staged moves; each must be followed by accept() or reject() ---------

  double try_voxel(int i, int m, double xi_new) {
    require_clean();
    if (!(xi_new >= 0.0) || !std::isfinite(xi_new))
      throw data_error("try_voxel: density must be finite and >= 0");
    staged_ = Staged::voxel;
    vox_i_ = i;
    vox_m_ = m;
    vox_old_ = field_.at(i, m);
    field_.at(i, m) = xi_new;

    staged_cells_.clear();
    for (const auto& [ci, ck] : proj_.affected_cells(i, m)) {
      const double c = proj_.project_cell(field_, kern_, ci, ck);
      staged_cells_.push_back(
          {ci, ck, c, log_normal_term(c, stack_.data.at(ci, ck), stack_.sigma.at(ci, ck))});
    }

    // tau reads C at (i, k) and (i, k - 1), so every staged cell invalidates
    // its own tau and the one below it.
    staged_tau_.clear();
    {
      std::vector<std::pair<int, int>> cells;
      for (const auto& sc : staged_cells_) {
        cells.emplace_back(sc.i, sc.k);
        if (sc.k < grid().n_eng()) cells.emplace_back(sc.i, sc.k + 1);
      }
      std::sort(cells.begin(), cells.end());
      cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
      for (const auto& [ci, ck] : cells) {
        const double t =
            ck == 1 ? 1.0 : sparsity_ratio(staged_c(ci, ck), staged_c(ci, ck - 1));
        staged_tau_.push_back({ci, ck, t});
      }
    }

    staged_prior_.clear();
    {
      std::vector<std::pair<int, int>> cells;
      for (const auto& st : staged_tau_) cells.emplace_back(st.i, st.k);
      cells.emplace_back(i, m);
      std::sort(cells.begin(), cells.end());
      cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
      for (const auto& [ci, ck] : cells) {
        const double nu = shrink_exponent(staged_tau(ci, ck), p_);
        staged_prior_.push_back({ci, ck, log_field_prior_term(field_.at(ci, ck), nu)});
      }
    }

    d_lik_ = 0.0;
    for (const auto& sc : staged_cells_) d_lik_ += sc.lik - lik_.at(sc.i, sc.k);
    d_prior_ = 0.0;
    for (const auto& sp : staged_prior_) d_prior_ += sp.value - prior_.at(sp.i, sp.k);
    d_kernel_ = 0.0;
    return d_lik_ + d_prior_;
  }

  double try_p(double p_new) {
    require_clean();
    staged_ = Staged::hyper;
    p_new_ = p_new;
    if (!(p_new >= psup_.lo && p_new <= psup_.hi)) {
      p_feasible_ = false;
      d_lik_ = d_kernel_ = 0.0;
      d_prior_ = -std::numeric_limits<double>::infinity();
      return d_prior_;
    }
    p_feasible_ = true;
    full_prior_ = CellArray(grid().n_data(), grid().n_eng());
    double tot = 0.0;
    for (int i = 1; i <= grid().n_data(); ++i)
      for (int k = 1; k <= grid().n_eng(); ++k) {
        const double v =
            log_field_prior_term(field_.at(i, k), shrink_exponent(tau_.at(i, k), p_new));
        full_prior_.at(i, k) = v;
        tot += v;
      }
    full_prior_total_ = tot;
    d_lik_ = d_kernel_ = 0.0;
    d_prior_ = tot - prior_total_;
    return d_prior_;
  }

  double try_kernel(const KernelVector& kern_new, double kernel_log_prior_new) {
    require_clean();
    if (kern_new.size() != grid().n_eng()) throw data_error("try_kernel: size mismatch");
    staged_ = Staged::kernel;
    kern_new_ = kern_new;
    kernel_prior_new_ = kernel_log_prior_new;
    recompute_full(field_, kern_new_, p_, full_C_, full_lik_, full_tau_, full_prior_,
                   full_lik_total_, full_prior_total_);
    d_lik_ = full_lik_total_ - lik_total_;
    d_prior_ = full_prior_total_ - prior_total_;
    d_kernel_ = kernel_prior_new_ - kernel_prior_;
    return d_lik_ + d_prior_ + d_kernel_;
  }

  void accept() {
    switch (staged_) {
      case Staged::none:
        throw config_error("posterior: accept without a staged move");
      case Staged::voxel:
        for (const auto& sc : staged_cells_) {
          C_.at(sc.i, sc.k) = sc.c;
          lik_.at(sc.i, sc.k) = sc.lik;
        }
        for (const auto& st : staged_tau_) tau_.at(st.i, st.k) = st.value;
        for (const auto& sp : staged_prior_) prior_.at(sp.i, sp.k) = sp.value;
        lik_total_ += d_lik_;
        prior_total_ += d_prior_;
        break;
      case Staged::hyper:
        if (!p_feasible_) throw config_error("posterior: accepted an infeasible p");
        p_ = p_new_;
        prior_ = std::move(full_prior_);
        prior_total_ = full_prior_total_;
        break;
      case Staged::kernel:
        kern_ = std::move(kern_new_);
        kernel_prior_ = kernel_prior_new_;
        C_ = std::move(full_C_);
        lik_ = std::move(full_lik_);
        tau_ = std::move(full_tau_);
        prior_ = std::move(full_prior_);
        lik_total_ = full_lik_total_;
        prior_total_ = full_prior_total_;
        break;
    }
    staged_ = Staged::none;
  }

  void reject() {
    if (staged_ == Staged::none) throw config_error("posterior: reject without a staged move");
    if (staged_ == Staged::voxel) field_.at(vox_i_, vox_m_) = vox_old_;
    staged_ = Staged::none;
  }

  // --- scratch audit --------------------------------------------------------

  struct AuditReport {
    double max_cell = 0.0;        // worst per-cell |cache - scratch| over C/lik/tau/prior
    double lik_total_drift = 0.0;
    double prior_total_drift = 0.0;
  };

  // Recompute every cache from scratch, report the worst deviations, and
  // adopt the scratch values (stops accumulation drift in the totals).
  AuditReport audit() {
    require_clean();
    CellArray c, lik, tau, prior;
    double lt = 0.0, pt = 0.0;
    recompute_full(field_, kern_, p_, c, lik, tau, prior, lt, pt);
    AuditReport rep;
    auto scan = [&rep](const CellArray& a, const CellArray& b) {
      for (std::size_t j = 0; j < a.values.size(); ++j)
        rep.max_cell = std::max(rep.max_cell, std::fabs(a.values[j] - b.values[j]));
    };
    scan(C_, c);
    scan(lik_, lik);
    scan(tau_, tau);
    scan(prior_, prior);
    rep.lik_total_drift = std::fabs(lt - lik_total_);
    rep.prior_total_drift = std::fabs(pt - prior_total_);
    C_ = std::move(c);
    lik_ = std::move(lik);
    tau_ = std::move(tau);
    prior_ = std::move(prior);
    lik_total_ = lt;
    prior_total_ = pt;
    return rep;
  }

 private:
  enum class Staged { none, voxel, hyper, kernel };

  struct StagedCell {
    int i, k;
    double c, lik;
  };
  struct StagedValue {
    int i, k;
    double value;
  };

  void require_clean() const {
    if (staged_ != Staged::none) throw config_error("posterior: previous move not resolved");
  }

  double staged_c(int i, int k) const {
    for (const auto& sc : staged_cells_)
      if (sc.i == i && sc.k == k) return sc.c;
    return C_.at(i, k);
  }
  double staged_tau(int i, int k) const {
    for (const auto& st : staged_tau_)
      if (st.i == i && st.k == k) return st.value;
    return tau_.at(i, k);
  }

  void recompute_full(const DensityField& f, const KernelVector& kern, double p, CellArray& c,
                      CellArray& lik, CellArray& tau, CellArray& prior, double& lik_tot,
                      double& prior_tot) const {
    c = proj_.project_all(f, kern);
    const int nd = grid().n_data(), ne = grid().n_eng();
    lik = CellArray(nd, ne);
    tau = CellArray(nd, ne);
    prior = CellArray(nd, ne);
    lik_tot = 0.0;
    prior_tot = 0.0;
    for (int i = 1; i <= nd; ++i)
      for (int k = 1; k <= ne; ++k) {
        const double l = log_normal_term(c.at(i, k), stack_.data.at(i, k), stack_.sigma.at(i, k));
        lik.at(i, k) = l;
        lik_tot += l;
        const double t = k == 1 ? 1.0 : sparsity_ratio(c.at(i, k), c.at(i, k - 1));
        tau.at(i, k) = t;
        const double v = log_field_prior_term(f.at(i, k), shrink_exponent(t, p));
        prior.at(i, k) = v;
        prior_tot += v;
      }
  }

  Projector proj_;
  ImageStack stack_;
  PSupport psup_;

  DensityField field_;
  KernelVector kern_;
  double kernel_prior_ = 0.0;
  double p_ = p_seed_default;

  ProjectionMatrix C_;
  CellArray lik_, tau_, prior_;
  double lik_total_ = 0.0, prior_total_ = 0.0;

  Staged staged_ = Staged::none;
  int vox_i_ = 0, vox_m_ = 0;
  double vox_old_ = 0.0;
  std::vector<StagedCell> staged_cells_;
  std::vector<StagedValue> staged_tau_, staged_prior_;
  double d_lik_ = 0.0, d_prior_ = 0.0, d_kernel_ = 0.0;

  bool p_feasible_ = false;
  double p_new_ = 0.0;
  KernelVector kern_new_;
  double kernel_prior_new_ = 0.0;
  CellArray full_C_, full_lik_, full_tau_, full_prior_;
  double full_lik_total_ = 0.0, full_prior_total_ = 0.0;
};

}  // namespace semtomo
