#include "sib/sibcore.hpp"

#include <fmt/format.h>

#include <cmath>

#include "sib/error.hpp"
#include "sib/ops.hpp"

namespace sib {

std::string_view to_string(DataTerm v) { return v == DataTerm::Mean ? "mean" : "sum"; }

std::string_view to_string(InitMethod v) {
  switch (v) {
    case InitMethod::Global: return "global";
    case InitMethod::Prototype: return "prototype";
    case InitMethod::SelfSupervised: return "ssl";
  }
  return "unknown";
}

std::string_view to_string(InnerMethod v) { return v == InnerMethod::Sib ? "sib" : "maml"; }

std::string_view to_string(PosteriorRegime v) {
  return v == PosteriorRegime::Gaussian ? "gaussian" : "deterministic";
}

DataTerm data_term_from_string(std::string_view s) {
  if (s == "mean") return DataTerm::Mean;
  if (s == "sum") return DataTerm::Sum;
  throw ConfigError(fmt::format("unknown data_term '{}' (expected mean or sum)", s));
}

InitMethod init_method_from_string(std::string_view s) {
  if (s == "global") return InitMethod::Global;
  if (s == "prototype") return InitMethod::Prototype;
  if (s == "ssl") return InitMethod::SelfSupervised;
  throw ConfigError(fmt::format("unknown init '{}' (expected global, prototype or ssl)", s));
}

InnerMethod inner_method_from_string(std::string_view s) {
  if (s == "sib") return InnerMethod::Sib;
  if (s == "maml") return InnerMethod::Maml;
  throw ConfigError(fmt::format("unknown inner method '{}' (expected sib or maml)", s));
}

PosteriorRegime posterior_regime_from_string(std::string_view s) {
  if (s == "gaussian") return PosteriorRegime::Gaussian;
  if (s == "deterministic") return PosteriorRegime::Deterministic;
  throw ConfigError(fmt::format("unknown posterior regime '{}' (expected gaussian or deterministic)", s));
}

void InnerLoopConfig::validate() const {
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("inner.eta must be finite and >= 0");
  if (mc_samples < 1) throw ConfigError("inner.mc_samples must be >= 1");
}

void InferenceConfig::validate() const {
  inner.validate();
  if (!std::isfinite(posterior.log_var)) throw ConfigError("posterior.log_var must be finite");
  if (!std::isfinite(ssl_eta) || ssl_eta < 0.0) throw ConfigError("ssl_eta must be finite and >= 0");
}

NoiseSource gaussian_noise(CounterRng& rng) {
  return [&rng](const ad::Shape& shape) {
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = rng.normal();
    return ad::Tensor::constant(shape, std::move(v));
  };
}

NoiseSource zero_noise() {
  return [](const ad::Shape& shape) { return ad::Tensor::zeros(shape); };
}

namespace {

std::size_t draws(const PosteriorConfig& posterior, std::size_t mc_samples) {
  return posterior.regime == PosteriorRegime::Deterministic ? 1 : mc_samples;
}

void require_finite(const ad::Tensor& t, const char* what, std::size_t step) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(fmt::format("{}: non-finite update at step {}", what, step));
  }
}

ad::Tensor sample_with(const ad::Tensor& theta, const PosteriorConfig& posterior, const ad::Tensor& eps) {
  if (posterior.regime == PosteriorRegime::Deterministic) return theta;
  return theta + ad::scale(eps, std::exp(0.5 * posterior.log_var));
}

// Monte-Carlo mean of predict_vjp(grad_fn(y_hat)) over posterior draws.
template <class GradFn>
ad::Tensor expected_vjp(const ad::Tensor& theta, const ad::Tensor& feats, const ModelView& model,
                        const PosteriorConfig& posterior, std::size_t mc_samples, const NoiseSource& noise,
                        GradFn grad_fn) {
  const auto s = draws(posterior, mc_samples);
  ad::Tensor acc;
  for (std::size_t i = 0; i < s; ++i) {
    const ad::Tensor w = sample_weights(theta, posterior, noise);
    const ad::Tensor y_hat = predict(model, feats, w);
    const ad::Tensor v = predict_vjp(model, feats, w, grad_fn(y_hat));
    acc = i == 0 ? v : acc + v;
  }
  return s == 1 ? acc : ad::scale(acc, 1.0 / static_cast<double>(s));
}

ad::Tensor one_hot(std::span<const int> labels, std::size_t classes, const char* what) {
  std::vector<double> v(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw Error(fmt::format("{}: label {} outside 0..{}", what, y, classes - 1));
    }
    v[i * classes + y] = 1.0;
  }
  return ad::Tensor::matrix(labels.size(), classes, std::move(v));
}

void check_targets(const ad::Tensor& y_hat, const Targets& t, const char* what) {
  const std::size_t cols = t.kind == TaskKind::Classification ? t.ways : 1;
  if (y_hat.rank() != 2 || y_hat.rows() != t.size() || y_hat.cols() != cols) {
    throw ShapeError(fmt::format("{}: predictions {} for {} targets of width {}", what,
                                 ad::to_string(y_hat.shape()), t.size(), cols));
  }
}

}  // namespace

ad::Tensor sample_weights(const ad::Tensor& theta, const PosteriorConfig& posterior, const NoiseSource& noise) {
  if (posterior.regime == PosteriorRegime::Deterministic) return theta;
  return sample_with(theta, posterior, noise(theta.shape()));
}

ad::Tensor sib_step(const ad::Tensor& theta, const ad::Tensor& query_features, const ModelView& model,
                    const InferenceConfig& cfg, const NoiseSource& noise, std::size_t step_index) {
  using namespace ad;
  const std::size_t n = query_features.rows();
  Tensor direction = expected_vjp(theta, query_features, model, cfg.posterior, cfg.inner.mc_samples, noise,
                                  [&](const Tensor& y_hat) { return synth_grad(model, y_hat); });
  if (cfg.inner.normalize_by_n) direction = scale(direction, 1.0 / static_cast<double>(n));
  if (cfg.inner.kl_in_inner) direction = direction + kl_grad_wrt_mean(theta, prior_node(model, theta.shape()));
  Tensor next = theta - scale(direction, cfg.inner.eta);
  require_finite(next, "sib_step", step_index);
  return next;
}

UnrollResult sib_unroll(const ad::Tensor& theta0, const ad::Tensor& query_features, const ModelView& model,
                        const InferenceConfig& cfg, const NoiseSource& noise) {
  UnrollResult r;
  r.theta = theta0;
  const ModelView frozen = cfg.inner.record_trajectory ? detach_view(model) : model;
  auto record = [&](const ad::Tensor& theta) {
    if (!cfg.inner.record_trajectory) return;
    const ad::Tensor t = ad::detach(theta);
    r.trajectory.thetas.push_back(t);
    r.trajectory.kl_to_prior.push_back(prior_term(t, frozen, cfg.posterior).item());
  };
  record(r.theta);
  for (std::size_t k = 0; k < cfg.inner.steps; ++k) {
    r.theta = sib_step(r.theta, query_features, model, cfg, noise, k);
    record(r.theta);
  }
  return r;
}

std::vector<double> surrogate_direction(const ad::Tensor& theta, const ad::Tensor& query_features,
                                        const ModelView& model, const InferenceConfig& cfg,
                                        const ad::Tensor& eps) {
  using namespace ad;
  const ModelView frozen = detach_view(model);
  const Tensor feats = detach(query_features);
  Tape tape;
  const Tensor th = tape.leaf(detach(theta));
  const Tensor w = sample_with(th, cfg.posterior, eps);
  const Tensor y_hat = predict(frozen, feats, w);
  const Tensor xi = synth_grad(frozen, detach(y_hat));
  const double c = cfg.inner.normalize_by_n ? 1.0 / static_cast<double>(feats.rows()) : 1.0;
  const Tensor s = scale(sum(xi * y_hat), c);
  return tape.backward(s).values_of(th);
}

Targets query_targets(const Episode& ep) {
  return Targets{ep.kind, ep.ways, ep.query_labels, ep.query_targets};
}

Targets support_targets(const Episode& ep) {
  return Targets{ep.kind, ep.ways, ep.support_labels, ep.support_targets};
}

ad::Tensor data_loss(const ad::Tensor& y_hat, const Targets& targets, DataTerm term) {
  using namespace ad;
  check_targets(y_hat, targets, "data_loss");
  const double n = static_cast<double>(targets.size());
  if (targets.kind == TaskKind::Classification) {
    const Tensor nll = neg(sum(one_hot(targets.labels, targets.ways, "data_loss") * log_softmax(y_hat)));
    return term == DataTerm::Mean ? scale(nll, 1.0 / n) : nll;
  }
  const Tensor y = Tensor::matrix(targets.values.size(), 1, {targets.values.begin(), targets.values.end()});
  const Tensor sq = sum(square(y_hat - y));
  return term == DataTerm::Mean ? scale(sq, 1.0 / n) : scale(sq, 0.5);
}

ad::Tensor data_loss_grad(const ad::Tensor& y_hat, const Targets& targets, DataTerm term) {
  using namespace ad;
  check_targets(y_hat, targets, "data_loss_grad");
  const double n = static_cast<double>(targets.size());
  if (targets.kind == TaskKind::Classification) {
    const Tensor g = softmax(y_hat) - one_hot(targets.labels, targets.ways, "data_loss_grad");
    return term == DataTerm::Mean ? scale(g, 1.0 / n) : g;
  }
  const Tensor y = Tensor::matrix(targets.values.size(), 1, {targets.values.begin(), targets.values.end()});
  const Tensor r = y_hat - y;
  return term == DataTerm::Mean ? scale(r, 2.0 / n) : r;
}

ad::Tensor maml_inner(const ad::Tensor& theta0, const ad::Tensor& support_features, const Targets& support,
                      const ModelView& model, const InferenceConfig& cfg, const NoiseSource& noise) {
  if (support.size() == 0 || support_features.rank() != 2 || support_features.rows() == 0) {
    throw Error("maml_inner: empty support set");
  }
  ad::Tensor theta = theta0;
  for (std::size_t k = 0; k < cfg.inner.steps; ++k) {
    const ad::Tensor g =
        expected_vjp(theta, support_features, model, cfg.posterior, cfg.inner.mc_samples, noise,
                     [&](const ad::Tensor& y_hat) { return data_loss_grad(y_hat, support, cfg.data_term); });
    theta = theta - ad::scale(g, cfg.inner.eta);
    require_finite(theta, "maml_inner", k);
  }
  return theta;
}

SslTask cyclic_shift_labeler(const ad::Tensor& features) {
  using namespace ad;
  const auto n = features.rows();
  const auto d = features.cols();
  const std::size_t stride = std::max<std::size_t>(1, d / 4);
  SslTask task;
  for (std::size_t i = 0; i < n; ++i) task.labels.push_back(static_cast<int>(i % 4));
  // Shift each group of rows with a permutation matrix so gradients reach the features.
  std::vector<Tensor> groups;
  std::vector<std::size_t> order;
  for (std::size_t z = 0; z < 4; ++z) {
    std::vector<std::size_t> rows;
    for (std::size_t i = z; i < n; i += 4) rows.push_back(i);
    if (rows.empty()) continue;
    std::vector<double> perm(d * d, 0.0);
    for (std::size_t j = 0; j < d; ++j) perm[((j + z * stride) % d) * d + j] = 1.0;
    groups.push_back(matmul(index_select(features, rows), Tensor::matrix(d, d, std::move(perm))));
    order.insert(order.end(), rows.begin(), rows.end());
  }
  std::vector<std::size_t> inverse(n);
  for (std::size_t r = 0; r < order.size(); ++r) inverse[order[r]] = r;
  task.inputs = index_select(groups.size() == 1 ? groups[0] : concat(groups, 0), inverse);
  return task;
}

namespace {

ad::Tensor ssl_logits(const ModelView& model, const ad::Tensor& inputs, const ad::Tensor& y_hat) {
  using namespace ad;
  const Tensor z = matmul(concat({y_hat, inputs}, 1), model["ssl.weight"]);
  return z + broadcast_to(model["ssl.bias"], z.shape());
}

void check_ssl(const ModelView& model, const SslTask& task) {
  const auto classes = model.spec().ssl_classes;
  if (task.labels.size() != task.inputs.rows()) {
    throw ShapeError(fmt::format("ssl: {} labels for {} inputs", task.labels.size(), task.inputs.rows()));
  }
  for (int z : task.labels) {
    if (z < 0 || static_cast<std::size_t>(z) >= classes) {
      throw Error(fmt::format("ssl labeler returned id {} outside 0..{}", z, classes - 1));
    }
  }
}

}  // namespace

ad::Tensor ssl_loss(const ModelView& model, const SslTask& task, const ad::Tensor& theta,
                    const PosteriorConfig& posterior, const NoiseSource& noise) {
  using namespace ad;
  check_ssl(model, task);
  const Tensor w = sample_weights(theta, posterior, noise);
  const Tensor z = ssl_logits(model, task.inputs, predict(model, task.inputs, w));
  const auto classes = model.spec().ssl_classes;
  const Tensor nll = neg(sum(one_hot(task.labels, classes, "ssl_loss") * log_softmax(z)));
  return scale(nll, 1.0 / static_cast<double>(task.labels.size()));
}

ad::Tensor ssl_init(const ModelView& model, const ad::Tensor& query_features, const SslLabeler& labeler,
                    const InferenceConfig& cfg, const NoiseSource& noise) {
  using namespace ad;
  const Tensor lambda = model["lambda.global"];
  const SslTask task = labeler(query_features);
  check_ssl(model, task);
  const auto k = model.spec().ways;
  const auto classes = model.spec().ssl_classes;
  const Tensor w = sample_weights(lambda, cfg.posterior, noise);
  const Tensor y_hat = predict(model, task.inputs, w);
  const Tensor z = ssl_logits(model, task.inputs, y_hat);
  const double n = static_cast<double>(task.labels.size());
  const Tensor dz = scale(softmax(z) - one_hot(task.labels, classes, "ssl_init"), 1.0 / n);
  std::vector<std::size_t> head_rows(k);
  for (std::size_t c = 0; c < k; ++c) head_rows[c] = c;
  const Tensor dy = matmul(dz, transpose(index_select(model["ssl.weight"], head_rows)));
  const Tensor grad = predict_vjp(model, task.inputs, w, dy);
  Tensor theta0 = lambda - scale(grad, cfg.ssl_eta);
  require_finite(theta0, "ssl_init", 0);
  return theta0;
}

AdaptationInput adaptation_input(const Episode& ep) {
  AdaptationInput in;
  in.kind = ep.kind;
  in.ways = ep.ways;
  in.support_inputs = ep.support_inputs;
  in.support_labels = ep.support_labels;
  in.support_values = ep.support_targets;
  in.query_inputs = ep.query_inputs;
  return in;
}

PosteriorResult build_posterior(const AdaptationInput& task, const ModelView& model, const InferenceConfig& cfg,
                                const NoiseSource& noise, const SslLabeler& labeler) {
  PosteriorResult r;
  r.query_features = features(model, task.query_inputs);
  const ad::Tensor fq = cfg.inner.detach_features ? ad::detach(r.query_features) : r.query_features;
  const bool has_support = task.support_inputs.rank() == 2 && task.support_inputs.rows() > 0;
  ad::Tensor fs;
  if (has_support) {
    fs = features(model, task.support_inputs);
    if (cfg.inner.detach_features) fs = ad::detach(fs);
  }
  switch (cfg.init) {
    case InitMethod::Global: r.theta0 = init_theta0_global(model); break;
    case InitMethod::Prototype:
      if (!has_support) throw Error("prototype initialization needs a support set");
      r.theta0 = init_theta0_proto(model, fs, task.support_labels, task.ways);
      break;
    case InitMethod::SelfSupervised: r.theta0 = ssl_init(model, fq, labeler, cfg, noise); break;
  }
  if (cfg.method == InnerMethod::Sib) {
    auto u = sib_unroll(r.theta0, fq, model, cfg, noise);
    r.theta = u.theta;
    r.trajectory = std::move(u.trajectory);
  } else {
    if (!has_support) throw Error("maml_inner: empty support set");
    const Targets support{task.kind, task.ways, task.support_labels, task.support_values};
    r.theta = maml_inner(r.theta0, fs, support, model, cfg, noise);
  }
  return r;
}

ad::Tensor prior_term(const ad::Tensor& theta, const ModelView& model, const PosteriorConfig& posterior) {
  const GaussianNode prior = prior_node(model, theta.shape());
  if (posterior.regime == PosteriorRegime::Deterministic) return prior_penalty(theta, prior);
  const GaussianNode q{theta, ad::Tensor::full(theta.shape(), posterior.log_var)};
  return kl_diag_gaussian(q, prior);
}

ObjectiveTerms task_objective(const Episode& ep, const ad::Tensor& theta, const ad::Tensor& query_features,
                              const ModelView& model, const InferenceConfig& cfg, const NoiseSource& noise) {
  using namespace ad;
  if (theta.shape() != model.spec().theta_shape()) {
    throw ShapeError(fmt::format("task_objective: theta {} vs expected {}", to_string(theta.shape()),
                                 to_string(model.spec().theta_shape())));
  }
  const Targets targets = query_targets(ep);
  const auto s = draws(cfg.posterior, cfg.inner.mc_samples);
  ObjectiveTerms out;
  for (std::size_t i = 0; i < s; ++i) {
    const Tensor w = sample_weights(theta, cfg.posterior, noise);
    const Tensor l = data_loss(predict(model, query_features, w), targets, cfg.data_term);
    out.data = i == 0 ? l : out.data + l;
  }
  if (s > 1) out.data = scale(out.data, 1.0 / static_cast<double>(s));
  out.kl = prior_term(theta, model, cfg.posterior);
  out.total = out.data + out.kl;
  return out;
}

void fill_query_losses(Trajectory& traj, const Episode& ep, const ad::Tensor& query_features,
                       const ModelView& model, DataTerm term) {
  const ModelView frozen = detach_view(model);
  const ad::Tensor feats = ad::detach(query_features);
  traj.query_loss.clear();
  for (const auto& theta : traj.thetas) {
    traj.query_loss.push_back(data_loss(predict(frozen, feats, theta), query_targets(ep), term).item());
  }
}

}  // namespace sib
