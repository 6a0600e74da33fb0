#include "sib/models.hpp"

#include <fmt/format.h>

#include <cmath>

#include "sib/error.hpp"
#include "sib/ops.hpp"
#include "sib/rng.hpp"

namespace sib {

std::string_view to_string(TaskMode mode) {
  switch (mode) {
    case TaskMode::Toy: return "toy";
    case TaskMode::FewShot: return "fewshot";
    case TaskMode::ZeroShot: return "fewshot-zeroshot";
  }
  return "unknown";
}

TaskMode task_mode_from_string(std::string_view name) {
  if (name == "toy") return TaskMode::Toy;
  if (name == "fewshot") return TaskMode::FewShot;
  if (name == "fewshot-zeroshot") return TaskMode::ZeroShot;
  throw ConfigError(fmt::format("unknown mode '{}' (expected toy, fewshot or fewshot-zeroshot)", name));
}

std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::Prior: return "prior";
    case ParamGroup::Init: return "init";
    case ParamGroup::SynthGrad: return "synth_grad";
    case ParamGroup::Head: return "head";
    case ParamGroup::Feature: return "feature";
  }
  return "unknown";
}

ModelSpec ModelSpec::toy() { return ModelSpec{}; }

ModelSpec ModelSpec::fewshot(std::size_t ways, std::size_t input_dim, std::size_t feature_dim) {
  ModelSpec s;
  s.mode = TaskMode::FewShot;
  s.ways = ways;
  s.input_dim = input_dim;
  s.feature_dim = feature_dim;
  s.xi_hidden = 8 * ways;
  s.feature_identity = false;
  return s;
}

ModelSpec ModelSpec::zeroshot(std::size_t ways, std::size_t input_dim, std::size_t feature_dim) {
  ModelSpec s = fewshot(ways, input_dim, feature_dim);
  s.mode = TaskMode::ZeroShot;
  return s;
}

ad::Shape ModelSpec::theta_shape() const {
  if (mode == TaskMode::Toy) return {1, 1};
  return {ways, feature_dim};
}

void ModelSpec::validate() const {
  if (ways < 1 || input_dim < 1 || feature_dim < 1 || xi_hidden < 1) {
    throw ConfigError("model: ways, input_dim, feature_dim and xi_hidden must be >= 1");
  }
  if (mode == TaskMode::Toy && (ways != 1 || input_dim != 1 || feature_dim != 1 || !feature_identity)) {
    throw ConfigError("model: toy mode needs scalar inputs, one output and an identity feature map");
  }
  if (feature_identity && input_dim != feature_dim) {
    throw ConfigError("model: an identity feature map needs input_dim == feature_dim");
  }
  if (!(classifier_scale > 0.0)) throw ConfigError("model: classifier_scale must be > 0");
  if (mode == TaskMode::ZeroShot && ssl_classes < 2) throw ConfigError("model: ssl_classes must be >= 2");
}

MetaModel::MetaModel(ModelSpec spec, std::vector<Param> params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  for (const auto& p : params_) {
    if (ad::numel(p.shape) != p.values.size()) {
      throw ShapeError(fmt::format("parameter {}: shape {} does not hold {} values", p.name,
                                   ad::to_string(p.shape), p.values.size()));
    }
  }
}

namespace {

std::vector<double> he_uniform(CounterRng& rng, std::size_t fan_in, std::size_t count) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(count);
  for (auto& x : v) x = bound * (2.0 * rng.uniform() - 1.0);
  return v;
}

}  // namespace

MetaModel MetaModel::create(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  CounterRng rng(mix64(seed ^ 0x6D6F64656CULL));
  const auto p = spec.ways;
  const auto h = spec.xi_hidden;
  const auto df = spec.feature_dim;
  std::vector<Param> ps;
  auto add = [&](std::string name, ParamGroup g, ad::Shape shape, std::vector<double> v) {
    ps.push_back(Param{std::move(name), g, std::move(shape), std::move(v)});
  };

  if (!spec.feature_identity) {
    std::vector<double> w(spec.input_dim * df);
    const double sd = 1.0 / std::sqrt(static_cast<double>(spec.input_dim));
    for (auto& x : w) x = sd * rng.normal();
    add("f.weight", ParamGroup::Feature, {spec.input_dim, df}, std::move(w));
  }
  const auto theta = spec.theta_shape();
  switch (spec.mode) {
    case TaskMode::Toy:
      add("lambda.global", ParamGroup::Init, theta, std::vector<double>(ad::numel(theta), 0.0));
      break;
    case TaskMode::FewShot:
      add("lambda.scale", ParamGroup::Init, {1, df}, std::vector<double>(df, 1.0));
      break;
    case TaskMode::ZeroShot: {
      std::vector<double> l(ad::numel(theta));
      const double sd = 1.0 / std::sqrt(static_cast<double>(df));
      for (auto& x : l) x = sd * rng.normal();
      add("lambda.global", ParamGroup::Init, theta, std::move(l));
      add("ssl.weight", ParamGroup::Init, {p + df, spec.ssl_classes},
          he_uniform(rng, p + df, (p + df) * spec.ssl_classes));
      add("ssl.bias", ParamGroup::Init, {1, spec.ssl_classes}, std::vector<double>(spec.ssl_classes, 0.0));
      break;
    }
  }
  add("xi.w1", ParamGroup::SynthGrad, {p, h}, he_uniform(rng, p, p * h));
  add("xi.b1", ParamGroup::SynthGrad, {1, h}, std::vector<double>(h, 0.0));
  add("xi.w2", ParamGroup::SynthGrad, {h, h}, he_uniform(rng, h, h * h));
  add("xi.b2", ParamGroup::SynthGrad, {1, h}, std::vector<double>(h, 0.0));
  add("xi.w3", ParamGroup::SynthGrad, {h, p}, std::vector<double>(h * p, 0.0));
  add("xi.b3", ParamGroup::SynthGrad, {1, p}, std::vector<double>(p, 0.0));
  const std::size_t prior_dim = spec.mode == TaskMode::Toy ? 1 : df;
  add("psi.mean", ParamGroup::Prior, {1, prior_dim}, std::vector<double>(prior_dim, 0.0));
  add("psi.log_var", ParamGroup::Prior, {1, prior_dim}, std::vector<double>(prior_dim, 0.0));
  if (spec.mode != TaskMode::Toy) {
    add("head.log_scale", ParamGroup::Head, {}, {std::log(spec.classifier_scale)});
  }
  return MetaModel(spec, std::move(ps));
}

bool MetaModel::has(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return true;
  return false;
}

const Param& MetaModel::param(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw Error(fmt::format("model has no parameter '{}'", name));
}

Param& MetaModel::param(std::string_view name) {
  return const_cast<Param&>(static_cast<const MetaModel&>(*this).param(name));
}

std::size_t MetaModel::num_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.values.size();
  return n;
}

bool ModelView::has(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }

const ad::Tensor& ModelView::operator[](std::string_view name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw Error(fmt::format("model ({}) has no parameter '{}'", to_string(spec_.mode), name));
  }
  return it->second;
}

ModelView bind(const MetaModel& model, ad::Tape* tape,
               const std::function<bool(const Param&)>& trainable) {
  ModelView view;
  view.spec_ = model.spec();
  for (const auto& p : model.params()) {
    if (tape != nullptr && trainable(p)) {
      view.tensors_.emplace(p.name, tape->leaf(p.shape, p.values));
      view.trainable_.push_back(p.name);
    } else {
      view.tensors_.emplace(p.name, ad::Tensor::constant(p.shape, p.values));
    }
  }
  return view;
}

ModelView bind(const MetaModel& model, ad::Tape& tape, bool train_f) {
  return bind(model, &tape, [train_f](const Param& p) { return train_f || p.group != ParamGroup::Feature; });
}

ModelView bind_constant(const MetaModel& model) {
  return bind(model, nullptr, [](const Param&) { return false; });
}

ModelView detach_view(const ModelView& view) {
  ModelView out;
  out.spec_ = view.spec_;
  for (const auto& [name, t] : view.tensors_) out.tensors_.emplace(name, ad::detach(t));
  return out;
}

ModelView make_view(const ModelSpec& spec, const std::vector<std::pair<std::string, ad::Tensor>>& tensors) {
  ModelView out;
  out.spec_ = spec;
  for (const auto& [name, t] : tensors) {
    if (!out.tensors_.emplace(name, t).second) throw Error(fmt::format("make_view: duplicate parameter '{}'", name));
    if (t.requires_grad()) out.trainable_.push_back(name);
  }
  return out;
}

ad::Tensor features(const ModelView& model, const ad::Tensor& x) {
  if (model.spec().feature_identity) return x;
  return ad::matmul(x, model["f.weight"]);
}

ad::Tensor init_theta0_global(const ModelView& model) { return model["lambda.global"]; }

ad::Tensor init_theta0_proto(const ModelView& model, const ad::Tensor& support_features,
                             const std::vector<int>& labels, std::size_t ways) {
  using namespace ad;
  const auto n = support_features.rank() == 2 ? support_features.rows() : 0;
  if (n == 0) throw Error("init_theta0_proto: empty support set (use the global initialization)");
  if (labels.size() != n) {
    throw ShapeError(fmt::format("init_theta0_proto: {} labels for {} support points", labels.size(), n));
  }
  std::vector<std::size_t> counts(ways, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= ways) {
      throw Error(fmt::format("init_theta0_proto: label {} outside 0..{}", y, ways - 1));
    }
    ++counts[y];
  }
  for (std::size_t c = 0; c < ways; ++c) {
    if (counts[c] == 0) throw Error(fmt::format("init_theta0_proto: class {} missing from the support set", c));
  }
  std::vector<double> avg(ways * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) avg[labels[i] * n + i] = 1.0 / static_cast<double>(counts[labels[i]]);
  const Tensor means = matmul(Tensor::matrix(ways, n, std::move(avg)), support_features);
  return means * broadcast_to(model["lambda.scale"], means.shape());
}

ad::Tensor synth_grad(const ModelView& model, const ad::Tensor& y_hat) {
  using namespace ad;
  const auto& w1 = model["xi.w1"];
  if (y_hat.rank() != 2 || y_hat.cols() != w1.rows()) {
    throw ShapeError(fmt::format("synth_grad: predictions {} do not match xi input width {}",
                                 to_string(y_hat.shape()), w1.rows()));
  }
  auto layer = [&](const Tensor& in, const char* w, const char* b) {
    const Tensor z = matmul(in, model[w]);
    return z + broadcast_to(model[b], z.shape());
  };
  const Tensor h1 = relu(layer(y_hat, "xi.w1", "xi.b1"));
  const Tensor h2 = relu(layer(h1, "xi.w2", "xi.b2"));
  return layer(h2, "xi.w3", "xi.b3");
}

namespace {

struct CosineParts {
  ad::Tensor nf;   // n x 1
  ad::Tensor nw;   // k x 1
  ad::Tensor dot;  // n x k
  ad::Tensor den;  // n x k
};

CosineParts cosine_parts(const ad::Tensor& feats, const ad::Tensor& theta) {
  using namespace ad;
  if (feats.rank() != 2 || theta.rank() != 2 || feats.cols() != theta.cols()) {
    throw ShapeError(fmt::format("cosine_predict: shape mismatch {} vs {}", to_string(feats.shape()),
                                 to_string(theta.shape())));
  }
  CosineParts c;
  c.nf = sqrt(sum_axis(square(feats), 1));
  c.nw = sqrt(sum_axis(square(theta), 1));
  c.dot = matmul(feats, transpose(theta));
  c.den = add_scalar(matmul(c.nf, transpose(c.nw)), kCosineTau);
  return c;
}

}  // namespace

ad::Tensor cosine_logits(const ad::Tensor& scale, const ad::Tensor& feats, const ad::Tensor& theta) {
  using namespace ad;
  const auto c = cosine_parts(feats, theta);
  return broadcast_to(scale, c.dot.shape()) * (c.dot / c.den);
}

ad::Tensor cosine_predict(const ModelView& model, const ad::Tensor& feats, const ad::Tensor& theta) {
  return cosine_logits(ad::exp(model["head.log_scale"]), feats, theta);
}

ad::Tensor cosine_vjp(const ad::Tensor& scale, const ad::Tensor& feats, const ad::Tensor& theta,
                      const ad::Tensor& g) {
  using namespace ad;
  const auto c = cosine_parts(feats, theta);
  if (g.shape() != c.dot.shape()) {
    throw ShapeError(fmt::format("cosine_vjp: cotangent {} vs logits {}", to_string(g.shape()),
                                 to_string(c.dot.shape())));
  }
  const Tensor direct = matmul(transpose(g / c.den), feats);
  const Tensor weight = g * c.dot * broadcast_to(c.nf, c.dot.shape()) / square(c.den);
  const Tensor coef = transpose(sum_axis(weight, 0)) / add_scalar(c.nw, 1e-300);
  const Tensor radial = broadcast_to(coef, theta.shape()) * theta;
  return broadcast_to(scale, theta.shape()) * (direct - radial);
}

ad::Tensor linear_predict_toy(const ad::Tensor& theta, const ad::Tensor& x) {
  using namespace ad;
  if (theta.size() != 1 || x.rank() != 2 || x.cols() != 1) {
    throw ShapeError(fmt::format("linear_predict_toy: shape mismatch {} vs {}", to_string(theta.shape()),
                                 to_string(x.shape())));
  }
  return broadcast_to(reshape(theta, {1, 1}), x.shape()) * x;
}

ad::Tensor linear_vjp(const ad::Tensor& x, const ad::Tensor& g) {
  using namespace ad;
  if (x.shape() != g.shape()) {
    throw ShapeError(fmt::format("linear_vjp: shape mismatch {} vs {}", to_string(x.shape()),
                                 to_string(g.shape())));
  }
  return reshape(sum(g * x), {1, 1});
}

ad::Tensor predict(const ModelView& model, const ad::Tensor& feats, const ad::Tensor& theta) {
  if (model.spec().mode == TaskMode::Toy) return linear_predict_toy(theta, feats);
  return cosine_predict(model, feats, theta);
}

ad::Tensor predict_vjp(const ModelView& model, const ad::Tensor& feats, const ad::Tensor& theta,
                       const ad::Tensor& g) {
  if (model.spec().mode == TaskMode::Toy) return linear_vjp(feats, g);
  return cosine_vjp(ad::exp(model["head.log_scale"]), feats, theta, g);
}

GaussianNode prior_node(const ModelView& model, const ad::Shape& theta_shape) {
  return GaussianNode{ad::broadcast_to(model["psi.mean"], theta_shape),
                      ad::broadcast_to(model["psi.log_var"], theta_shape)};
}

DiagGaussian prior_distribution(const MetaModel& model) {
  return DiagGaussian(model.param("psi.mean").values, model.param("psi.log_var").values);
}

}  // namespace sib
