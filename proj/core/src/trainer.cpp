#include "sib/trainer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

#include "sib/error.hpp"
#include "sib/ops.hpp"

namespace sib {

namespace {

constexpr std::uint64_t kEvalNoiseSalt = 0x6576616C6E6F6973ULL;
constexpr std::uint64_t kShuffleSalt = 0x73687566666C6531ULL;

ClassPool pool_for(const RunConfig& cfg, Split split) {
  const std::string& path = split == Split::Train ? cfg.train_pool_csv
                            : split == Split::Val ? cfg.val_pool_csv
                                                  : cfg.test_pool_csv;
  if (path.empty()) return make_gaussian_pool(cfg.fewshot, split);
  const std::uint64_t first = split == Split::Train ? 0
                              : split == Split::Val ? cfg.fewshot.pool_train
                                                    : cfg.fewshot.pool_train + cfg.fewshot.pool_val;
  return load_pool_csv(std::filesystem::path(path), first);
}

}  // namespace

EpisodeSource::EpisodeSource(const RunConfig& cfg) : mode_(cfg.mode), run_seed_(cfg.seed), toy_(cfg.toy) {
  if (mode_ != TaskMode::Toy) {
    sampler_ = std::make_shared<FewShotSampler>(cfg.fewshot, pool_for(cfg, Split::Train), pool_for(cfg, Split::Val),
                                                pool_for(cfg, Split::Test));
  }
}

std::uint64_t EpisodeSource::seed_of(Split split, std::uint64_t index) const {
  return derive_task_seed(run_seed_, split, index);
}

Episode EpisodeSource::from_seed(Split split, std::uint64_t task_seed) const {
  switch (mode_) {
    case TaskMode::Toy: return gen_spinning_lines(toy_, task_seed);
    case TaskMode::FewShot: return sampler_->sample(split, task_seed);
    case TaskMode::ZeroShot: return sampler_->sample_zeroshot(split, task_seed);
  }
  throw Error("EpisodeSource: unknown mode");
}

Episode EpisodeSource::get(Split split, std::uint64_t index) const {
  return from_seed(split, seed_of(split, index));
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamHyper& h) {
  if (params.size() != grads.size()) {
    throw ShapeError(fmt::format("adam_step: {} parameters vs {} gradients", params.size(), grads.size()));
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.t = 0;
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grads[i];
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

void sgd_step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != grads.size()) {
    throw ShapeError(fmt::format("sgd_step: {} parameters vs {} gradients", params.size(), grads.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

double clip_global_norm(GradientSet& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g) v *= f;
  }
  return norm;
}

Optimizer::Optimizer(const OptimizerConfig& cfg, const MetaModel& model)
    : cfg_(cfg), states_(model.params().size()) {}

void Optimizer::step(MetaModel& model, const GradientSet& grads, const std::function<bool(const Param&)>& select) {
  auto& ps = model.params();
  if (grads.size() != ps.size()) throw ShapeError("Optimizer::step: gradient set does not match the model");
  const AdamHyper h{cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.eps};
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!select(ps[i])) continue;
    if (cfg_.kind == OptimizerKind::Adam) {
      adam_step(ps[i].values, grads[i], states_[i], h);
    } else {
      sgd_step(ps[i].values, grads[i], cfg_.lr);
    }
  }
}

const Metric* MetricsRow::find(std::string_view name) const {
  for (const auto& m : metrics)
    if (m.name == name) return &m;
  return nullptr;
}

double MetricsRow::value(std::string_view name) const {
  const Metric* m = find(name);
  if (m == nullptr) throw Error(fmt::format("metrics row has no '{}'", name));
  return m->value;
}

std::string format_double(double v) { return fmt::format("{}", v); }

MetricsCsv::MetricsCsv(std::ostream& out) : out_(&out) { *out_ << kHeader << '\n'; }

void MetricsCsv::write(const MetricsRow& row) {
  for (const auto& m : row.metrics) {
    *out_ << row.step << ',' << to_string(row.split) << ',' << m.name << ',' << format_double(m.value) << ','
          << format_double(m.ci95) << '\n';
  }
  out_->flush();
}

Metric aggregate(std::string name, std::span<const double> values) {
  if (values.empty()) throw Error("aggregate: no values");
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double ci = 0.0;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    ci = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return Metric{std::move(name), mean, ci};
}

std::uint64_t eval_noise_key(std::uint64_t task_seed) { return mix64(task_seed ^ kEvalNoiseSalt); }

EpisodeEval evaluate_episode(const MetaModel& model, const RunConfig& cfg, const Episode& ep) {
  const ModelView view = bind_constant(model);
  InferenceConfig inf = cfg.effective_inference();
  inf.inner.record_trajectory = false;
  CounterRng rng(eval_noise_key(ep.task_seed));
  const NoiseSource noise = gaussian_noise(rng);
  const PosteriorResult post = build_posterior(adaptation_input(ep), view, inf, noise);
  const ad::Tensor y_hat = predict(view, post.query_features, post.theta);
  const Targets targets = query_targets(ep);

  EpisodeEval out;
  out.metrics.push_back({"query_loss", data_loss(y_hat, targets, inf.data_term).item(), 0.0});
  if (ep.kind == TaskKind::Classification) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y_hat.rows(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < y_hat.cols(); ++c)
        if (y_hat.at(i, c) > y_hat.at(i, best)) best = c;
      if (static_cast<int>(best) == ep.query_labels[i]) ++correct;
    }
    out.metrics.push_back({"query_accuracy", 100.0 * static_cast<double>(correct) / static_cast<double>(y_hat.rows()), 0.0});
  } else {
    double se = 0.0;
    for (std::size_t i = 0; i < y_hat.rows(); ++i) {
      const double r = ep.query_targets[i] - y_hat[i];
      se += r * r;
    }
    out.metrics.push_back({"query_mse", se / static_cast<double>(y_hat.rows()), 0.0});
  }
  out.metrics.push_back({"kl_to_prior", prior_term(post.theta, view, inf.posterior).item(), 0.0});
  if (ep.kind == TaskKind::Regression) {
    const DiagGaussian q({post.theta.item()}, {inf.posterior.log_var});
    out.metrics.push_back({"kl_to_true_posterior", kl_diag_gaussian(q, true_posterior(ep, cfg.toy)), 0.0});
  }
  return out;
}

EvalResult evaluate(const MetaModel& model, const RunConfig& cfg, Split split, std::size_t episodes, std::size_t step) {
  if (episodes == 0) throw Error("evaluate: zero episodes");
  const EpisodeSource source(cfg);
  EvalResult r;
  r.episodes.reserve(episodes);
  for (std::size_t i = 0; i < episodes; ++i) r.episodes.push_back(evaluate_episode(model, cfg, source.get(split, i)));
  r.degenerate = episodes == 1;
  r.row.step = step;
  r.row.split = split;
  const auto& first = r.episodes.front().metrics;
  std::vector<double> column(episodes);
  for (std::size_t m = 0; m < first.size(); ++m) {
    for (std::size_t i = 0; i < episodes; ++i) column[i] = r.episodes[i].metrics[m].value;
    r.row.metrics.push_back(aggregate(first[m].name, column));
    if (first[m].name == "kl_to_prior" && cfg.inference.posterior.regime == PosteriorRegime::Gaussian) {
      Metric mi = r.row.metrics.back();
      mi.name = "mi_estimate";
      r.row.metrics.push_back(mi);
    }
  }
  if (cfg.mode == TaskMode::Toy) {
    r.row.metrics.push_back({"prior_kl_to_true_prior", kl_diag_gaussian(prior_distribution(model), true_prior(cfg.toy)), 0.0});
  }
  return r;
}

BatchGradient batch_gradient(const MetaModel& model, const RunConfig& cfg, std::span<const Episode> episodes,
                             std::span<const std::uint64_t> noise_keys) {
  if (episodes.empty() || episodes.size() != noise_keys.size()) {
    throw Error("batch_gradient: need one noise key per episode and at least one episode");
  }
  const InferenceConfig inf = cfg.effective_inference();
  const auto& ps = model.params();
  BatchGradient out;
  out.grads.resize(ps.size());
  for (std::size_t p = 0; p < ps.size(); ++p) out.grads[p].assign(ps[p].values.size(), 0.0);
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    ad::Tape tape;
    const ModelView view = bind(model, tape, cfg.train_f);
    CounterRng rng(noise_keys[e]);
    const NoiseSource noise = gaussian_noise(rng);
    const PosteriorResult post = build_posterior(adaptation_input(episodes[e]), view, inf, noise);
    const ObjectiveTerms obj = task_objective(episodes[e], post.theta, post.query_features, view, inf, noise);
    out.objective += obj.total.item();
    const ad::Gradients g = tape.backward(obj.total);
    for (std::size_t p = 0; p < ps.size(); ++p) {
      const ad::Tensor& t = view[ps[p].name];
      if (!t.requires_grad()) continue;
      const auto values = g.values_of(t);
      for (std::size_t i = 0; i < values.size(); ++i) out.grads[p][i] += values[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(episodes.size());
  out.objective *= inv;
  for (auto& gp : out.grads)
    for (double& v : gp) v *= inv;
  return out;
}

std::string selection_metric(TaskMode mode) { return mode == TaskMode::Toy ? "query_mse" : "query_accuracy"; }

namespace {

bool all_finite(const BatchGradient& bg) {
  if (!std::isfinite(bg.objective)) return false;
  for (const auto& g : bg.grads)
    for (double v : g)
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  };
  MetaModel model = options.initial ? *options.initial : MetaModel::create(cfg.model_spec(), cfg.seed);
  TrainResult result{model, model, 0, 0.0, 0, {}, false, {}};
  const EpisodeSource source(cfg);
  Optimizer opt(cfg.optimizer, model);
  const bool train_f = cfg.train_f;
  auto trainable = [train_f](const Param& p) { return train_f || p.group != ParamGroup::Feature; };
  auto emit = [&](MetricsRow row) {
    row.wall_time_ms = elapsed_ms();
    if (options.on_row) options.on_row(row);
    result.rows.push_back(std::move(row));
  };

  std::size_t global_step = 0;
  auto update = [&](std::span<const Episode> batch, std::span<const std::uint64_t> keys) -> std::optional<double> {
    try {
      BatchGradient bg = batch_gradient(model, cfg, batch, keys);
      if (!all_finite(bg)) throw NumericError(fmt::format("non-finite objective or gradient at step {}", global_step + 1));
      if (!cfg.sequential_updates) {
        clip_global_norm(bg.grads, cfg.optimizer.clip_norm);
        opt.step(model, bg.grads, trainable);
      } else {
        clip_global_norm(bg.grads, cfg.optimizer.clip_norm);
        MetaModel before = model;
        opt.step(model, bg.grads, [](const Param& p) { return p.group == ParamGroup::Prior; });
        BatchGradient second = batch_gradient(model, cfg, batch, keys);
        if (!all_finite(second)) {
          model = std::move(before);
          throw NumericError(fmt::format("non-finite objective or gradient at step {}", global_step + 1));
        }
        clip_global_norm(second.grads, cfg.optimizer.clip_norm);
        opt.step(model, second.grads, [&](const Param& p) { return p.group != ParamGroup::Prior && trainable(p); });
      }
      ++global_step;
      return bg.objective;
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      return std::nullopt;
    }
  };
  auto noise_key = [&](const Episode& ep) { return mix64(ep.task_seed ^ mix64(global_step + 1)); };

  if (cfg.mode == TaskMode::Toy) {
    std::vector<Episode> tasks;
    tasks.reserve(cfg.toy.n_train);
    for (std::size_t i = 0; i < cfg.toy.n_train; ++i) tasks.push_back(source.get(Split::Train, i));
    for (std::size_t epoch = 0; epoch < cfg.epochs && !result.aborted; ++epoch) {
      std::vector<std::size_t> order(tasks.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      CounterRng(mix64(cfg.seed ^ kShuffleSalt) + epoch).shuffle(order);
      double objective = 0.0;
      std::size_t batches = 0;
      for (std::size_t b = 0; b < order.size() && !result.aborted; b += cfg.batch_tasks) {
        std::vector<Episode> batch;
        std::vector<std::uint64_t> keys;
        for (std::size_t j = b; j < std::min(order.size(), b + cfg.batch_tasks); ++j) {
          batch.push_back(tasks[order[j]]);
          keys.push_back(noise_key(batch.back()));
        }
        if (auto obj = update(batch, keys)) {
          objective += *obj;
          ++batches;
        }
      }
      if (result.aborted) break;
      if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
        MetricsRow row{epoch + 1, Split::Train, {{"objective", objective / static_cast<double>(batches), 0.0}}};
        emit(std::move(row));
        emit(evaluate(model, cfg, Split::Test, cfg.toy.n_test, epoch + 1).row);
      }
    }
    result.best = model;
    result.best_step = global_step;
  } else {
    const std::string metric = selection_metric(cfg.mode);
    bool have_best = false;
    double window = 0.0;
    std::size_t window_n = 0;
    for (std::size_t s = 1; s <= cfg.steps && !result.aborted; ++s) {
      std::vector<Episode> batch;
      std::vector<std::uint64_t> keys;
      for (std::size_t j = 0; j < cfg.batch_tasks; ++j) {
        batch.push_back(source.get(Split::Train, (s - 1) * cfg.batch_tasks + j));
        keys.push_back(noise_key(batch.back()));
      }
      const auto obj = update(batch, keys);
      if (!obj) break;
      window += *obj;
      ++window_n;
      if (s % cfg.eval_every == 0 || s == cfg.steps) {
        emit(MetricsRow{s, Split::Train, {{"objective", window / static_cast<double>(window_n), 0.0}}});
        window = 0.0;
        window_n = 0;
        MetricsRow val = evaluate(model, cfg, Split::Val, cfg.val_episodes, s).row;
        const double v = val.value(metric);
        if (!have_best || v > result.best_value) {
          have_best = true;
          result.best_value = v;
          result.best = model;
          result.best_step = s;
        }
        emit(std::move(val));
      }
    }
    if (!have_best) result.best = model;
  }
  result.model = model;
  result.steps_done = global_step;
  return result;
}

}  // namespace sib
