#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sib/config.hpp"
#include "sib/models.hpp"
#include "sib/rng.hpp"
#include "sib/tasks.hpp"

namespace sib {

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Mean and standard error of the mean.
Estimate mean_estimate(std::span<const double> values);

/// Posterior mean theta^K of a toy episode under the model (evaluation noise).
double toy_posterior_mean(const MetaModel& model, const RunConfig& cfg, const Episode& ep);

/// E_t KL(q_{theta^K} || p(w | d)); toy mode only.
Estimate kl_to_true_posterior(const MetaModel& model, const RunConfig& cfg, std::span<const Episode> episodes);
/// E_t KL(q_{theta^K} || p_psi); Gaussian posterior regime only.
Estimate mi_estimate(const MetaModel& model, const RunConfig& cfg, std::span<const Episode> episodes);
/// KL(p_psi || p(w)); toy mode only.
double prior_kl_to_true_prior(const MetaModel& model, const ToyConfig& toy);
/// mean_t |theta_t^k - w_t| for k = 0..K; toy mode only.
std::vector<double> trajectory_errors(const MetaModel& model, const RunConfig& cfg, std::span<const Episode> episodes);

/// Maps a toy dataset to the mean of its posterior over w.
using PosteriorMeanFn = std::function<double(const Episode&)>;

struct GenGapResult {
  Estimate gap;
  double loss_min = 0.0;
  double loss_max = 0.0;
  /// Half the observed range of the per-point loss over held-out (w, z).
  double sigma_plugin = 0.0;
  std::size_t trials = 0;
};

/// Monte-Carlo estimate of E[ mean_j L(w, d'_j) - L(w, d) ] on the toy, with
/// L the mean squared error over a dataset, w ~ N(posterior_mean(d),
/// posterior_sd^2). Each trial draws a slope from the toy prior, then d and
/// the fresh d'_j independently given that slope.
GenGapResult gen_gap(const ToyConfig& toy, const PosteriorMeanFn& posterior_mean, double posterior_sd,
                     std::size_t trials, std::size_t fresh_datasets, std::uint64_t seed);
GenGapResult gen_gap(const MetaModel& model, const RunConfig& cfg, std::size_t trials, std::size_t fresh_datasets,
                     std::uint64_t seed);

/// sqrt(2 sigma^2 mi / n).
double gen_bound(double sigma, double n, double mi);

/// Finite joint q(t) q(d|t) q(w|d,t) with prior p(w) and likelihood p(d|w,t).
/// Tables are flat row-major: q_w_given_dt[(t*D + d)*W + w],
/// p_d_given_wt[(t*W + w)*D + d].
struct DiscreteInstance {
  std::size_t tasks = 0;
  std::size_t datasets = 0;
  std::size_t weights = 0;
  std::vector<double> q_t;
  std::vector<double> q_d_given_t;
  std::vector<double> q_w_given_dt;
  std::vector<double> p_w;
  std::vector<double> p_d_given_wt;

  static constexpr std::size_t kMaxSize = 16;
  void validate() const;
};

DiscreteInstance random_discrete_instance(std::size_t tasks, std::size_t datasets, std::size_t weights,
                                          CounterRng& rng);
/// Replaces p(d|w,t) by the variational conditional q(d|w,t).
DiscreteInstance with_matched_likelihood(DiscreteInstance inst);

struct IbReport {
  double objective = 0.0;            // E[-log p(d|w,t)] + E KL(q(w|d,t) || p(w))
  double mutual_information = 0.0;   // I_q(w; d | t)
  double cross_entropy = 0.0;        // H_{q,p}(d | w, t)
  double prior_kl = 0.0;             // E_t KL(q(w|t) || p(w))
  double residual = 0.0;             // objective - (sum of the three terms)
  double conditional_entropy = 0.0;  // H_q(d | w, t)
  double lower_bound = 0.0;          // mutual_information + conditional_entropy
  /// E_{t,d} KL(q(w|d,t) || p(w)), an upper bound on mutual_information.
  double mi_upper_estimate = 0.0;
  bool identity_holds = false;
  bool inequality_holds = false;
};

IbReport ib_decomposition_check(const DiscreteInstance& inst, double tolerance = 1e-9);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct SweepRow {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double gen_gap = 0.0;
  double gen_gap_se = 0.0;
  double sigma = 0.0;
  double mi = 0.0;
  double bound = 0.0;
  double mse = 0.0;
};

/// Trains the toy at each query size and seed and reports gap, bound and
/// test MSE. `seeds` runs use seeds base.seed, base.seed + 1, ...
std::vector<SweepRow> vary_n_sweep(const RunConfig& base, std::span<const std::size_t> n_values, std::size_t seeds,
                                   const std::function<void(const SweepRow&)>& on_row = {});

}  // namespace sib
