#include "sib/analysis.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sib/error.hpp"
#include "sib/ops.hpp"
#include "sib/sibcore.hpp"
#include "sib/trainer.hpp"

namespace sib {

Estimate mean_estimate(std::span<const double> values) {
  if (values.empty()) throw Error("mean_estimate: no values");
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

namespace {

void require_toy(const RunConfig& cfg, const char* what) {
  if (cfg.mode != TaskMode::Toy) throw Error(fmt::format("{}: only available in toy mode", what));
}

PosteriorResult toy_posterior(const MetaModel& model, const RunConfig& cfg, const Episode& ep, bool trajectory) {
  const ModelView view = bind_constant(model);
  InferenceConfig inf = cfg.effective_inference();
  inf.inner.record_trajectory = trajectory;
  CounterRng rng(eval_noise_key(ep.task_seed));
  return build_posterior(adaptation_input(ep), view, inf, gaussian_noise(rng));
}

}  // namespace

double toy_posterior_mean(const MetaModel& model, const RunConfig& cfg, const Episode& ep) {
  require_toy(cfg, "toy_posterior_mean");
  return toy_posterior(model, cfg, ep, false).theta.item();
}

Estimate kl_to_true_posterior(const MetaModel& model, const RunConfig& cfg, std::span<const Episode> episodes) {
  require_toy(cfg, "kl_to_true_posterior");
  const double lv = cfg.effective_inference().posterior.log_var;
  std::vector<double> kl;
  for (const auto& ep : episodes) {
    const DiagGaussian q({toy_posterior_mean(model, cfg, ep)}, {lv});
    kl.push_back(kl_diag_gaussian(q, true_posterior(ep, cfg.toy)));
  }
  return mean_estimate(kl);
}

Estimate mi_estimate(const MetaModel& model, const RunConfig& cfg, std::span<const Episode> episodes) {
  const InferenceConfig inf = cfg.effective_inference();
  if (inf.posterior.regime != PosteriorRegime::Gaussian) {
    throw Error("mi_estimate: needs the Gaussian posterior regime");
  }
  const ModelView view = bind_constant(model);
  std::vector<double> kl;
  for (const auto& ep : episodes) {
    CounterRng rng(eval_noise_key(ep.task_seed));
    const auto post = build_posterior(adaptation_input(ep), view, inf, gaussian_noise(rng));
    kl.push_back(prior_term(post.theta, view, inf.posterior).item());
  }
  return mean_estimate(kl);
}

double prior_kl_to_true_prior(const MetaModel& model, const ToyConfig& toy) {
  if (model.spec().mode != TaskMode::Toy) throw Error("prior_kl_to_true_prior: only available in toy mode");
  return kl_diag_gaussian(prior_distribution(model), true_prior(toy));
}

std::vector<double> trajectory_errors(const MetaModel& model, const RunConfig& cfg, std::span<const Episode> episodes) {
  require_toy(cfg, "trajectory_errors");
  std::vector<double> err(cfg.inference.inner.steps + 1, 0.0);
  if (cfg.inference.method != InnerMethod::Sib) throw Error("trajectory_errors: needs the SIB inner loop");
  for (const auto& ep : episodes) {
    const auto post = toy_posterior(model, cfg, ep, true);
    const auto& thetas = post.trajectory.thetas;
    for (std::size_t k = 0; k < thetas.size(); ++k) err[k] += std::abs(thetas[k].item() - ep.true_w);
  }
  for (double& e : err) e /= static_cast<double>(episodes.size());
  return err;
}

GenGapResult gen_gap(const ToyConfig& toy, const PosteriorMeanFn& posterior_mean, double posterior_sd,
                     std::size_t trials, std::size_t fresh_datasets, std::uint64_t seed) {
  if (trials < 1 || fresh_datasets < 1) throw Error("gen_gap: trials and fresh_datasets must be >= 1");
  GenGapResult r;
  r.trials = trials;
  r.loss_min = std::numeric_limits<double>::infinity();
  r.loss_max = -std::numeric_limits<double>::infinity();
  std::vector<double> gaps(trials);
  auto dataset_loss = [](const Episode& d, double w) {
    double total = 0.0;
    for (std::size_t i = 0; i < d.query_size(); ++i) {
      const double res = d.query_targets[i] - w * d.query_inputs[i];
      total += res * res;
    }
    return total / static_cast<double>(d.query_size());
  };
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t task_seed = derive_task_seed(seed, Split::Test, t);
    const double slope = gen_spinning_lines(toy, task_seed).true_w;
    const Episode d = resample_spinning_lines(toy, slope, mix64(task_seed ^ 0x6F6273657276ULL));
    CounterRng rng(mix64(task_seed ^ 0x67617073616D706CULL));
    const double w = posterior_mean(d) + posterior_sd * rng.normal();
    double fresh = 0.0;
    for (std::size_t j = 0; j < fresh_datasets; ++j) {
      const Episode dj = resample_spinning_lines(toy, slope, mix64(task_seed + (j + 1) * kGolden));
      fresh += dataset_loss(dj, w);
      for (std::size_t i = 0; i < dj.query_size(); ++i) {
        const double res = dj.query_targets[i] - w * dj.query_inputs[i];
        r.loss_min = std::min(r.loss_min, res * res);
        r.loss_max = std::max(r.loss_max, res * res);
      }
    }
    gaps[t] = fresh / static_cast<double>(fresh_datasets) - dataset_loss(d, w);
  }
  r.gap = mean_estimate(gaps);
  r.sigma_plugin = 0.5 * (r.loss_max - r.loss_min);
  return r;
}

GenGapResult gen_gap(const MetaModel& model, const RunConfig& cfg, std::size_t trials, std::size_t fresh_datasets,
                     std::uint64_t seed) {
  require_toy(cfg, "gen_gap");
  const double sd = std::exp(0.5 * cfg.effective_inference().posterior.log_var);
  return gen_gap(
      cfg.toy, [&](const Episode& ep) { return toy_posterior_mean(model, cfg, ep); }, sd, trials, fresh_datasets,
      seed);
}

double gen_bound(double sigma, double n, double mi) {
  if (!(mi >= 0.0)) throw Error(fmt::format("gen_bound: mutual information {} is negative", mi));
  if (!(sigma > 0.0)) throw Error("gen_bound: sigma must be > 0");
  if (!(n >= 1.0)) throw Error("gen_bound: n must be >= 1");
  return std::sqrt(2.0 * sigma * sigma * mi / n);
}

void DiscreteInstance::validate() const {
  if (tasks < 1 || datasets < 1 || weights < 1 || tasks > kMaxSize || datasets > kMaxSize || weights > kMaxSize) {
    throw Error(fmt::format("DiscreteInstance: sizes {}x{}x{} outside 1..{}", tasks, datasets, weights, kMaxSize));
  }
  auto check = [](const char* name, const std::vector<double>& table, std::size_t rows, std::size_t cols) {
    if (table.size() != rows * cols) {
      throw Error(fmt::format("DiscreteInstance: {} has {} entries, expected {}", name, table.size(), rows * cols));
    }
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double v = table[r * cols + c];
        if (!(v >= 0.0) || !std::isfinite(v)) throw Error(fmt::format("DiscreteInstance: {} has entry {}", name, v));
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-12) throw Error(fmt::format("DiscreteInstance: a row of {} sums to {}", name, s));
    }
  };
  check("q(t)", q_t, 1, tasks);
  check("q(d|t)", q_d_given_t, tasks, datasets);
  check("q(w|d,t)", q_w_given_dt, tasks * datasets, weights);
  check("p(w)", p_w, 1, weights);
  check("p(d|w,t)", p_d_given_wt, tasks * weights, datasets);
}

DiscreteInstance random_discrete_instance(std::size_t tasks, std::size_t datasets, std::size_t weights,
                                          CounterRng& rng) {
  auto rows = [&](std::size_t count, std::size_t width) {
    std::vector<double> v(count * width);
    for (std::size_t r = 0; r < count; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < width; ++c) s += v[r * width + c] = std::exp(rng.normal());
      for (std::size_t c = 0; c < width; ++c) v[r * width + c] /= s;
    }
    return v;
  };
  DiscreteInstance inst;
  inst.tasks = tasks;
  inst.datasets = datasets;
  inst.weights = weights;
  inst.q_t = rows(1, tasks);
  inst.q_d_given_t = rows(tasks, datasets);
  inst.q_w_given_dt = rows(tasks * datasets, weights);
  inst.p_w = rows(1, weights);
  inst.p_d_given_wt = rows(tasks * weights, datasets);
  inst.validate();
  return inst;
}

namespace {

// x log(x / y) with 0 log 0 = 0.
double xlogy_ratio(double x, double y) {
  if (x == 0.0) return 0.0;
  return x * std::log(x / y);
}

// -x log y with 0 log 0 = 0.
double neg_xlogy(double x, double y) {
  if (x == 0.0) return 0.0;
  return -x * std::log(y);
}

std::vector<double> aggregated_posterior(const DiscreteInstance& in) {
  const auto T = in.tasks, D = in.datasets, W = in.weights;
  std::vector<double> q_w_t(T * W, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t w = 0; w < W; ++w)
        q_w_t[t * W + w] += in.q_d_given_t[t * D + d] * in.q_w_given_dt[(t * D + d) * W + w];
  return q_w_t;
}

}  // namespace

DiscreteInstance with_matched_likelihood(DiscreteInstance in) {
  const auto T = in.tasks, D = in.datasets, W = in.weights;
  const auto q_w_t = aggregated_posterior(in);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t w = 0; w < W; ++w) {
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        const double joint = in.q_d_given_t[t * D + d] * in.q_w_given_dt[(t * D + d) * W + w];
        in.p_d_given_wt[(t * W + w) * D + d] = q_w_t[t * W + w] > 0.0 ? joint / q_w_t[t * W + w] : 1.0 / D;
        s += in.p_d_given_wt[(t * W + w) * D + d];
      }
      for (std::size_t d = 0; d < D; ++d) in.p_d_given_wt[(t * W + w) * D + d] /= s;
    }
  }
  return in;
}

IbReport ib_decomposition_check(const DiscreteInstance& in, double tolerance) {
  in.validate();
  const auto T = in.tasks, D = in.datasets, W = in.weights;
  const auto q_w_t = aggregated_posterior(in);
  IbReport r;
  for (std::size_t t = 0; t < T; ++t) {
    const double qt = in.q_t[t];
    for (std::size_t d = 0; d < D; ++d) {
      const double qd = in.q_d_given_t[t * D + d];
      double kl_post_prior = 0.0;
      for (std::size_t w = 0; w < W; ++w) {
        const double qw = in.q_w_given_dt[(t * D + d) * W + w];
        const double joint = qd * qw;
        const double p_lik = in.p_d_given_wt[(t * W + w) * D + d];
        const double nll = neg_xlogy(joint, p_lik);
        kl_post_prior += xlogy_ratio(qw, in.p_w[w]);
        r.cross_entropy += qt * nll;
        r.mutual_information += qt * xlogy_ratio(joint, q_w_t[t * W + w] * qd) ;
        const double q_d_given_wt = q_w_t[t * W + w] > 0.0 ? joint / q_w_t[t * W + w] : 0.0;
        r.conditional_entropy += qt * neg_xlogy(joint, q_d_given_wt);
      }
      r.mi_upper_estimate += qt * qd * kl_post_prior;
    }
    double kl_agg = 0.0;
    for (std::size_t w = 0; w < W; ++w) kl_agg += xlogy_ratio(q_w_t[t * W + w], in.p_w[w]);
    r.prior_kl += qt * kl_agg;
  }
  r.objective = r.cross_entropy + r.mi_upper_estimate;
  r.residual = r.objective - (r.mutual_information + r.cross_entropy + r.prior_kl);
  r.lower_bound = r.mutual_information + r.conditional_entropy;
  r.identity_holds = std::abs(r.residual) < tolerance;
  r.inequality_holds = r.objective >= r.lower_bound - tolerance;
  return r;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("spearman: need two equal-length samples of size >= 2");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::vector<SweepRow> vary_n_sweep(const RunConfig& base, std::span<const std::size_t> n_values, std::size_t seeds,
                                   const std::function<void(const SweepRow&)>& on_row) {
  require_toy(base, "vary_n_sweep");
  if (n_values.empty()) throw Error("vary_n_sweep: no query sizes");
  if (seeds < 1) throw Error("vary_n_sweep: seeds must be >= 1");
  std::vector<SweepRow> rows;
  for (std::size_t n : n_values) {
    for (std::size_t s = 0; s < seeds; ++s) {
      RunConfig cfg = base;
      cfg.toy.n = n;
      cfg.seed = base.seed + s;
      const TrainResult tr = train(cfg);
      if (tr.aborted) throw NumericError(fmt::format("vary_n_sweep: training aborted at n={}: {}", n, tr.abort_reason));
      SweepRow row;
      row.n = n;
      row.seed = cfg.seed;
      const auto gg = gen_gap(tr.model, cfg, cfg.analysis.gen_gap_trials, cfg.analysis.fresh_datasets,
                              mix64(cfg.seed ^ 0x7377656570ULL));
      row.gen_gap = gg.gap.value;
      row.gen_gap_se = gg.gap.std_error;
      row.sigma = cfg.analysis.sigma.value_or(gg.sigma_plugin);
      const EvalResult ev = evaluate(tr.model, cfg, Split::Test, cfg.toy.n_test);
      row.mi = ev.row.value("mi_estimate");
      row.mse = ev.row.value("query_mse");
      row.bound = gen_bound(row.sigma, static_cast<double>(n), row.mi);
      if (on_row) on_row(row);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace sib
