#include "sib/selfcheck.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "sib/distributions.hpp"
#include "sib/ops.hpp"
#include "sib/rng.hpp"

namespace sib {

using ad::Tensor;

namespace {

Tensor random_tensor(CounterRng& rng, ad::Shape shape, double lo_abs = 0.0) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) {
    x = rng.normal();
    if (lo_abs > 0.0) x += x >= 0.0 ? lo_abs : -lo_abs;
  }
  return Tensor::constant(std::move(shape), std::move(v));
}

Tensor positive_tensor(CounterRng& rng, ad::Shape shape) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = 0.5 + rng.uniform() * 2.0;
  return Tensor::constant(std::move(shape), std::move(v));
}

// sum(t * c) with a fixed pseudo-random c, so every output entry is probed.
Tensor probe(const Tensor& t) {
  CounterRng rng(0xC0FFEEULL + t.size());
  std::vector<double> c(t.size());
  for (double& x : c) x = rng.normal();
  return ad::sum(ad::mul(t, Tensor::constant(t.shape(), std::move(c))));
}

std::vector<std::pair<std::string, Tensor>> zip(const MetaModel& m, const std::vector<Tensor>& leaves) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < leaves.size(); ++i) out.emplace_back(m.params()[i].name, leaves[i]);
  return out;
}

std::vector<Tensor> param_tensors(const MetaModel& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.params()) out.push_back(Tensor::constant(p.shape, p.values));
  return out;
}

ad::GradCheckResult check_objective(const std::string& name, const MetaModel& model, const Episode& ep,
                                    const InferenceConfig& inf, std::uint64_t noise_key, double tolerance) {
  const ad::ScalarFn fn = [&](ad::Tape&, const std::vector<Tensor>& leaves) {
    const ModelView view = make_view(model.spec(), zip(model, leaves));
    CounterRng rng(noise_key);
    const NoiseSource noise = gaussian_noise(rng);
    const PosteriorResult post = build_posterior(adaptation_input(ep), view, inf, noise);
    return task_objective(ep, post.theta, post.query_features, view, inf, noise).total;
  };
  return ad::check_gradients(name, fn, param_tensors(model), 1e-5, tolerance);
}

}  // namespace

Episode small_classification_episode(std::size_t ways, std::size_t dim, std::size_t query, std::uint64_t seed) {
  CounterRng rng(mix64(seed));
  std::vector<std::vector<double>> protos(ways, std::vector<double>(dim));
  for (auto& p : protos)
    for (double& x : p) x = rng.normal();
  auto point = [&](std::size_t c) {
    std::vector<double> v(dim);
    for (std::size_t j = 0; j < dim; ++j) v[j] = protos[c][j] + 0.3 * rng.normal();
    return v;
  };
  Episode ep;
  ep.kind = TaskKind::Classification;
  ep.ways = ways;
  ep.task_seed = seed;
  std::vector<double> sx, qx, pv;
  for (std::size_t c = 0; c < ways; ++c) {
    const auto v = point(c);
    sx.insert(sx.end(), v.begin(), v.end());
    ep.support_labels.push_back(static_cast<int>(c));
    pv.insert(pv.end(), protos[c].begin(), protos[c].end());
  }
  for (std::size_t i = 0; i < query; ++i) {
    const std::size_t c = i % ways;
    const auto v = point(c);
    qx.insert(qx.end(), v.begin(), v.end());
    ep.query_labels.push_back(static_cast<int>(c));
  }
  ep.support_inputs = Tensor::matrix(ways, dim, std::move(sx));
  ep.query_inputs = Tensor::matrix(query, dim, std::move(qx));
  ep.prototypes = Tensor::matrix(ways, dim, std::move(pv));
  return ep;
}

MetaModel perturbed_model(const ModelSpec& spec, std::uint64_t seed, double scale) {
  MetaModel m = MetaModel::create(spec, seed);
  CounterRng rng(mix64(seed ^ 0x5045525455524232ULL));
  for (auto& p : m.params())
    for (double& v : p.values) v += scale * rng.normal();
  return m;
}

std::vector<ad::GradCheckResult> gradcheck_suite(std::uint64_t seed, double tolerance) {
  using namespace ad;
  CounterRng rng(mix64(seed));
  std::vector<GradCheckResult> out;
  auto unary = [&](const std::string& name, Tensor (*op)(const Tensor&), Tensor x) {
    out.push_back(check_gradients(
        name, [op](Tape&, const std::vector<Tensor>& l) { return probe(op(l[0])); }, {std::move(x)}, 1e-5,
        tolerance));
  };
  auto binary = [&](const std::string& name, Tensor (*op)(const Tensor&, const Tensor&), Tensor a, Tensor b) {
    out.push_back(check_gradients(
        name, [op](Tape&, const std::vector<Tensor>& l) { return probe(op(l[0], l[1])); },
        {std::move(a), std::move(b)}, 1e-5, tolerance));
  };
  const Shape m{3, 4};
  binary("add", add, random_tensor(rng, m), random_tensor(rng, m));
  binary("sub", sub, random_tensor(rng, m), random_tensor(rng, m));
  binary("mul", mul, random_tensor(rng, m), random_tensor(rng, m));
  binary("div", div, random_tensor(rng, m), positive_tensor(rng, m));
  binary("matmul", matmul, random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2}));
  unary("neg", neg, random_tensor(rng, m));
  unary("relu", relu, random_tensor(rng, m, 0.1));
  unary("tanh", ad::tanh, random_tensor(rng, m));
  unary("exp", ad::exp, random_tensor(rng, m));
  unary("log", ad::log, positive_tensor(rng, m));
  unary("sqrt", ad::sqrt, positive_tensor(rng, m));
  unary("square", square, random_tensor(rng, m));
  unary("transpose", transpose, random_tensor(rng, m));
  unary("softmax", softmax, random_tensor(rng, m));
  unary("log_softmax", log_softmax, random_tensor(rng, m));
  unary("sum", sum, random_tensor(rng, m));
  unary("mean", mean, random_tensor(rng, m));
  unary("softmax_1d", softmax, random_tensor(rng, {5}));
  auto custom = [&](const std::string& name, ScalarFn fn, std::vector<Tensor> in) {
    out.push_back(check_gradients(name, fn, std::move(in), 1e-5, tolerance));
  };
  custom("scale", [](Tape&, const std::vector<Tensor>& l) { return probe(scale(l[0], -1.7)); },
         {random_tensor(rng, m)});
  custom("add_scalar", [](Tape&, const std::vector<Tensor>& l) { return probe(add_scalar(l[0], 0.4)); },
         {random_tensor(rng, m)});
  custom("sum_axis0", [](Tape&, const std::vector<Tensor>& l) { return probe(sum_axis(l[0], 0)); },
         {random_tensor(rng, m)});
  custom("sum_axis1", [](Tape&, const std::vector<Tensor>& l) { return probe(sum_axis(l[0], 1)); },
         {random_tensor(rng, m)});
  custom("broadcast_scalar", [](Tape&, const std::vector<Tensor>& l) { return probe(broadcast_to(l[0], {3, 4})); },
         {random_tensor(rng, {})});
  custom("broadcast_row", [](Tape&, const std::vector<Tensor>& l) { return probe(broadcast_to(l[0], {3, 4})); },
         {random_tensor(rng, {1, 4})});
  custom("broadcast_col", [](Tape&, const std::vector<Tensor>& l) { return probe(broadcast_to(l[0], {3, 4})); },
         {random_tensor(rng, {3, 1})});
  custom("reshape", [](Tape&, const std::vector<Tensor>& l) { return probe(reshape(l[0], {2, 6})); },
         {random_tensor(rng, m)});
  custom("concat0", [](Tape&, const std::vector<Tensor>& l) { return probe(concat({l[0], l[1]}, 0)); },
         {random_tensor(rng, {2, 4}), random_tensor(rng, {3, 4})});
  custom("concat1", [](Tape&, const std::vector<Tensor>& l) { return probe(concat({l[0], l[1]}, 1)); },
         {random_tensor(rng, {3, 2}), random_tensor(rng, {3, 1})});
  custom("index_select",
         [](Tape&, const std::vector<Tensor>& l) { return probe(index_select(l[0], {2, 0, 2, 1})); },
         {random_tensor(rng, m)});

  custom("kl_diag_gaussian",
         [](Tape&, const std::vector<Tensor>& l) { return kl_diag_gaussian(GaussianNode{l[0], l[1]}, {l[2], l[3]}); },
         {random_tensor(rng, m), random_tensor(rng, m), random_tensor(rng, m), random_tensor(rng, m)});
  custom("sample_reparam",
         [](Tape&, const std::vector<Tensor>& l) { return probe(sample_reparam(GaussianNode{l[0], l[1]}, l[2])); },
         {random_tensor(rng, m), random_tensor(rng, m), random_tensor(rng, m)});
  custom("prior_penalty",
         [](Tape&, const std::vector<Tensor>& l) { return prior_penalty(l[0], GaussianNode{l[1], l[2]}); },
         {random_tensor(rng, m), random_tensor(rng, m), random_tensor(rng, m)});
  custom("kl_grad_wrt_mean",
         [](Tape&, const std::vector<Tensor>& l) { return probe(kl_grad_wrt_mean(l[0], GaussianNode{l[1], l[2]})); },
         {random_tensor(rng, m), random_tensor(rng, m), random_tensor(rng, m)});
  custom("cosine_logits",
         [](Tape&, const std::vector<Tensor>& l) { return probe(cosine_logits(l[0], l[1], l[2])); },
         {random_tensor(rng, {}), random_tensor(rng, {5, 4}), random_tensor(rng, {3, 4})});
  custom("cosine_vjp",
         [](Tape&, const std::vector<Tensor>& l) { return probe(cosine_vjp(l[0], l[1], l[2], l[3])); },
         {random_tensor(rng, {}), random_tensor(rng, {5, 4}), random_tensor(rng, {3, 4}),
          random_tensor(rng, {5, 3})});

  // Full unrolled graphs, K = 3.
  {
    const ModelSpec spec = ModelSpec::fewshot(3, 4, 4);
    const MetaModel model = perturbed_model(spec, seed);
    const Episode ep = small_classification_episode(3, 4, 5, seed);
    InferenceConfig inf;
    inf.inner.steps = 3;
    inf.inner.eta = 0.1;
    inf.inner.kl_in_inner = true;
    inf.inner.detach_features = false;
    inf.init = InitMethod::Prototype;
    inf.posterior.regime = PosteriorRegime::Gaussian;
    inf.posterior.log_var = std::log(0.01);
    out.push_back(check_objective("sib_unrolled_cosine_gaussian", model, ep, inf, seed, tolerance));
    inf.posterior.regime = PosteriorRegime::Deterministic;
    inf.posterior.log_var = 0.0;
    out.push_back(check_objective("sib_unrolled_cosine_deterministic", model, ep, inf, seed, tolerance));
  }
  {
    const ModelSpec spec = ModelSpec::zeroshot(3, 4, 4);
    const MetaModel model = perturbed_model(spec, seed + 1);
    Episode ep = small_classification_episode(3, 4, 8, seed + 1);
    ep.support_inputs = Tensor::zeros({0, 4});
    ep.support_labels.clear();
    InferenceConfig inf;
    inf.inner.steps = 3;
    inf.inner.eta = 0.1;
    inf.inner.detach_features = false;
    inf.init = InitMethod::SelfSupervised;
    inf.posterior.regime = PosteriorRegime::Deterministic;
    inf.posterior.log_var = 0.0;
    out.push_back(check_objective("sib_unrolled_ssl_init", model, ep, inf, seed, tolerance));
  }
  {
    const MetaModel model = perturbed_model(ModelSpec::toy(), seed + 2);
    ToyConfig toy;
    toy.n = 8;
    const Episode ep = gen_spinning_lines(toy, seed);
    InferenceConfig inf;
    inf.inner.steps = 3;
    inf.inner.eta = 0.05;
    inf.inner.kl_in_inner = true;
    inf.data_term = DataTerm::Sum;
    inf.posterior.log_var = std::log(0.01);
    out.push_back(check_objective("sib_unrolled_toy", model, ep, inf, seed, tolerance));
  }
  {
    const ModelSpec spec = ModelSpec::fewshot(3, 4, 4);
    const MetaModel model = perturbed_model(spec, seed + 3);
    Episode ep = small_classification_episode(3, 4, 5, seed + 3);
    InferenceConfig inf;
    inf.inner.steps = 3;
    inf.inner.eta = 0.1;
    inf.init = InitMethod::Prototype;
    inf.inner.detach_features = false;
    inf.method = InnerMethod::Maml;
    inf.posterior.regime = PosteriorRegime::Deterministic;
    inf.posterior.log_var = 0.0;
    out.push_back(check_objective("maml_unrolled_cosine", model, ep, inf, seed, tolerance));
  }
  return out;
}

}  // namespace sib
