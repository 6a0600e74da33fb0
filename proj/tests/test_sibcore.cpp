#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "sib/error.hpp"
#include "sib/ops.hpp"
#include "sib/rng.hpp"
#include "sib/selfcheck.hpp"
#include "sib/sibcore.hpp"

using namespace sib;
using ad::Tensor;

namespace {

NoiseSource fixed_noise(const Tensor& eps) {
  return [eps](const ad::Shape&) { return eps; };
}

Tensor random_matrix(CounterRng& rng, std::size_t r, std::size_t c, double s = 1.0) {
  std::vector<double> v(r * c);
  for (double& x : v) x = s * rng.normal();
  return Tensor::matrix(r, c, v);
}

void set_constant_xi(MetaModel& m, double value) {
  for (auto& p : m.params())
    if (p.group == ParamGroup::SynthGrad) std::fill(p.values.begin(), p.values.end(), 0.0);
  std::fill(m.param("xi.b3").values.begin(), m.param("xi.b3").values.end(), value);
}

InferenceConfig fewshot_inference() {
  InferenceConfig c;
  c.init = InitMethod::Prototype;
  c.inner.kl_in_inner = true;
  c.inner.eta = 0.05;
  return c;
}

}  // namespace

TEST(SibStep, HandWorkedToyStep) {
  MetaModel m = MetaModel::create(ModelSpec::toy(), 0);
  set_constant_xi(m, 1.0);
  InferenceConfig cfg;
  cfg.inner.eta = 1e-3;
  cfg.posterior.regime = PosteriorRegime::Deterministic;
  const Tensor next =
      sib_step(Tensor::matrix(1, 1, {0.5}), Tensor::matrix(2, 1, {1, 2}), bind_constant(m), cfg, zero_noise());
  EXPECT_NEAR(next.item(), 0.4985, 1e-15);
}

TEST(SibStep, ZeroSyntheticGradientIsIdentity) {
  MetaModel m = perturbed_model(ModelSpec::fewshot(3, 4, 4), 2);
  set_constant_xi(m, 0.0);
  InferenceConfig cfg = fewshot_inference();
  cfg.inner.kl_in_inner = false;
  CounterRng rng(3);
  const Tensor theta = random_matrix(rng, 3, 4);
  CounterRng noise_rng(4);
  const Tensor next = sib_step(theta, random_matrix(rng, 6, 4), bind_constant(m), cfg, gaussian_noise(noise_rng));
  EXPECT_EQ(next.storage(), theta.storage());
}

TEST(SibUnroll, ZeroStepsReturnsInit) {
  const MetaModel m = perturbed_model(ModelSpec::fewshot(3, 4, 4), 2);
  InferenceConfig cfg = fewshot_inference();
  cfg.inner.steps = 0;
  CounterRng rng(5);
  const Tensor theta0 = random_matrix(rng, 3, 4);
  const auto r = sib_unroll(theta0, random_matrix(rng, 6, 4), bind_constant(m), cfg, zero_noise());
  EXPECT_EQ(r.theta.storage(), theta0.storage());
}

TEST(SibUnroll, ComposesSteps) {
  const MetaModel m = perturbed_model(ModelSpec::fewshot(3, 4, 4), 2);
  const ModelView v = bind_constant(m);
  InferenceConfig cfg = fewshot_inference();
  cfg.inner.steps = 3;
  CounterRng rng(6);
  const Tensor theta0 = random_matrix(rng, 3, 4);
  const Tensor fq = random_matrix(rng, 6, 4);
  CounterRng a(11), b(11);
  const auto r = sib_unroll(theta0, fq, v, cfg, gaussian_noise(a));
  Tensor t = theta0;
  const NoiseSource nb = gaussian_noise(b);
  for (std::size_t k = 0; k < 3; ++k) t = sib_step(t, fq, v, cfg, nb, k);
  EXPECT_EQ(r.theta.storage(), t.storage());
}

TEST(SibUnroll, TrajectoryHasKPlusOneEntries) {
  const MetaModel m = perturbed_model(ModelSpec::fewshot(3, 4, 4), 2);
  InferenceConfig cfg = fewshot_inference();
  cfg.inner.steps = 4;
  cfg.inner.record_trajectory = true;
  CounterRng rng(7);
  const auto r = sib_unroll(random_matrix(rng, 3, 4), random_matrix(rng, 6, 4), bind_constant(m), cfg, zero_noise());
  EXPECT_EQ(r.trajectory.thetas.size(), 5u);
  EXPECT_EQ(r.trajectory.kl_to_prior.size(), 5u);
  EXPECT_EQ(r.trajectory.thetas.back().storage(), r.theta.storage());
}

TEST(SibStep, RejectsNonFiniteUpdateWithStepIndex) {
  MetaModel m = MetaModel::create(ModelSpec::toy(), 0);
  set_constant_xi(m, 1e308);
  InferenceConfig cfg;
  cfg.inner.eta = 1e10;
  cfg.posterior.regime = PosteriorRegime::Deterministic;
  try {
    sib_step(Tensor::matrix(1, 1, {0.5}), Tensor::matrix(2, 1, {1, 2}), bind_constant(m), cfg, zero_noise(), 2);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find('2'), std::string::npos) << e.what();
  }
}

// Naive per-example loop over the cosine head: sum_i sum_c xi_ic * d y_ic / d theta.
TEST(Surrogate, MatchesNaivePerExampleVjp) {
  CounterRng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 3, d = 4, n = 7;
    const MetaModel m = perturbed_model(ModelSpec::fewshot(k, d, d), 20 + trial);
    const ModelView v = bind_constant(m);
    InferenceConfig cfg = fewshot_inference();
    cfg.inner.kl_in_inner = false;
    const Tensor theta = random_matrix(rng, k, d);
    const Tensor eps = random_matrix(rng, k, d);
    const Tensor f = random_matrix(rng, n, d);

    const double sd = std::exp(0.5 * cfg.posterior.log_var);
    std::vector<double> w(k * d);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = theta[i] + sd * eps[i];
    const double s = std::exp(m.param("head.log_scale").values[0]);
    std::vector<double> y(n * k), nf(n), nw(k);
    for (std::size_t i = 0; i < n; ++i) {
      double a = 0;
      for (std::size_t j = 0; j < d; ++j) a += f.at(i, j) * f.at(i, j);
      nf[i] = std::sqrt(a);
    }
    for (std::size_t c = 0; c < k; ++c) {
      double a = 0;
      for (std::size_t j = 0; j < d; ++j) a += w[c * d + j] * w[c * d + j];
      nw[c] = std::sqrt(a);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < k; ++c) {
        double dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += f.at(i, j) * w[c * d + j];
        y[i * k + c] = s * dot / (nf[i] * nw[c] + kCosineTau);
      }
    const Tensor xi = synth_grad(v, Tensor::matrix(n, k, y));
    std::vector<double> naive(k * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < k; ++c) {
        double dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += f.at(i, j) * w[c * d + j];
        const double den = nf[i] * nw[c] + kCosineTau;
        for (std::size_t j = 0; j < d; ++j) {
          const double dy = s * (f.at(i, j) / den - dot * nf[i] * w[c * d + j] / (nw[c] * den * den));
          naive[c * d + j] += xi.at(i, c) * dy / static_cast<double>(n);
        }
      }
    const auto sur = surrogate_direction(theta, f, v, cfg, eps);
    const Tensor step = sib_step(theta, f, v, cfg, fixed_noise(eps));
    for (std::size_t i = 0; i < naive.size(); ++i) {
      EXPECT_NEAR(sur[i], naive[i], 1e-12);
      EXPECT_NEAR((theta[i] - step[i]) / cfg.inner.eta, naive[i], 1e-12);
    }
  }
}

TEST(Surrogate, ToySumConvention) {
  MetaModel m = perturbed_model(ModelSpec::toy(), 3);
  InferenceConfig cfg;
  cfg.inner.normalize_by_n = false;
  cfg.posterior.regime = PosteriorRegime::Deterministic;
  const ModelView v = bind_constant(m);
  const Tensor x = Tensor::matrix(3, 1, {0.5, -1.0, 2.0});
  const Tensor theta = Tensor::matrix(1, 1, {0.7});
  const Tensor xi = synth_grad(v, Tensor::matrix(3, 1, {0.35, -0.7, 1.4}));
  const double naive = xi[0] * 0.5 - xi[1] * 1.0 + xi[2] * 2.0;
  EXPECT_NEAR(surrogate_direction(theta, x, v, cfg, Tensor::zeros({1, 1}))[0], naive, 1e-12);
}

TEST(Purity, QueryLabelsNeverReachTheta) {
  const MetaModel m = perturbed_model(ModelSpec::fewshot(5, 6, 6), 4);
  const ModelView v = bind_constant(m);
  InferenceConfig cfg = fewshot_inference();
  for (std::uint64_t t = 0; t < 20; ++t) {
    Episode ep = small_classification_episode(5, 6, 15, t);
    CounterRng a(t), b(t);
    const auto base = build_posterior(adaptation_input(ep), v, cfg, gaussian_noise(a));
    CounterRng shuffle(100 + t);
    for (int& l : ep.query_labels) l = static_cast<int>(shuffle.below(5));
    const auto other = build_posterior(adaptation_input(ep), v, cfg, gaussian_noise(b));
    EXPECT_EQ(base.theta.storage(), other.theta.storage());
  }
}

TEST(Maml, ZeroEtaAndZeroStepsAreIdentity) {
  const MetaModel m = perturbed_model(ModelSpec::fewshot(3, 4, 4), 5);
  const Episode ep = small_classification_episode(3, 4, 6, 1);
  InferenceConfig cfg = fewshot_inference();
  cfg.method = InnerMethod::Maml;
  CounterRng rng(9);
  const Tensor theta0 = random_matrix(rng, 3, 4);
  const ModelView v = bind_constant(m);
  const Tensor fs = features(v, ep.support_inputs);
  cfg.inner.eta = 0.0;
  EXPECT_EQ(maml_inner(theta0, fs, support_targets(ep), v, cfg, zero_noise()).storage(), theta0.storage());
  cfg.inner.eta = 0.1;
  cfg.inner.steps = 0;
  EXPECT_EQ(maml_inner(theta0, fs, support_targets(ep), v, cfg, zero_noise()).storage(), theta0.storage());
}

TEST(Maml, LeastSquaresStepMatchesClosedForm) {
  const MetaModel m = MetaModel::create(ModelSpec::toy(), 0);
  InferenceConfig cfg;
  cfg.posterior.regime = PosteriorRegime::Deterministic;
  cfg.inner.steps = 1;
  cfg.inner.eta = 0.1;
  const std::vector<double> x{1.0, -2.0, 0.5}, y{0.3, 1.0, -0.4};
  const Targets t{TaskKind::Regression, 1, {}, y};
  const double theta = 0.8;
  double g = 0;
  for (std::size_t i = 0; i < 3; ++i) g += 2.0 / 3.0 * (theta * x[i] - y[i]) * x[i];
  const Tensor next =
      maml_inner(Tensor::matrix(1, 1, {theta}), Tensor::matrix(3, 1, x), t, bind_constant(m), cfg, zero_noise());
  EXPECT_NEAR(next.item(), theta - 0.1 * g, 1e-15);
}

TEST(Maml, EmptySupportThrows) {
  const MetaModel m = MetaModel::create(ModelSpec::toy(), 0);
  InferenceConfig cfg;
  EXPECT_THROW(maml_inner(Tensor::matrix(1, 1, {0.0}), Tensor::zeros({0, 1}), Targets{}, bind_constant(m), cfg,
                          zero_noise()),
               Error);
}

TEST(Objective, MatchesNaiveReimplementation) {
  const std::size_t k = 3, d = 4;
  const MetaModel m = perturbed_model(ModelSpec::fewshot(k, d, d), 6);
  const ModelView v = bind_constant(m);
  const Episode ep = small_classification_episode(k, d, 9, 2);
  InferenceConfig cfg = fewshot_inference();
  CounterRng rng(10);
  const Tensor theta = random_matrix(rng, k, d);
  const Tensor eps = random_matrix(rng, k, d);
  const Tensor f = features(v, ep.query_inputs);
  const auto obj = task_objective(ep, theta, f, v, cfg, fixed_noise(eps));

  const double sd = std::exp(0.5 * cfg.posterior.log_var);
  const double s = std::exp(m.param("head.log_scale").values[0]);
  const std::size_t n = ep.query_size();
  double ce = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> z(k);
    double nf = 0;
    for (std::size_t j = 0; j < d; ++j) nf += f.at(i, j) * f.at(i, j);
    nf = std::sqrt(nf);
    for (std::size_t c = 0; c < k; ++c) {
      double dot = 0, nw = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double w = theta.at(c, j) + sd * eps.at(c, j);
        dot += f.at(i, j) * w;
        nw += w * w;
      }
      z[c] = s * dot / (nf * std::sqrt(nw) + kCosineTau);
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double lse = 0;
    for (double zc : z) lse += std::exp(zc - mx);
    ce += mx + std::log(lse) - z[static_cast<std::size_t>(ep.query_labels[i])];
  }
  ce /= static_cast<double>(n);
  double kl = 0;
  const auto& pm = m.param("psi.mean").values;
  const auto& plv = m.param("psi.log_var").values;
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < d; ++j) {
      const double vq = std::exp(cfg.posterior.log_var), vp = std::exp(plv[j]);
      const double diff = theta.at(c, j) - pm[j];
      kl += 0.5 * (plv[j] - cfg.posterior.log_var + (vq + diff * diff) / vp - 1.0);
    }
  EXPECT_NEAR(obj.data.item(), ce, 1e-12);
  EXPECT_NEAR(obj.kl.item(), kl, 1e-12);
  EXPECT_NEAR(obj.total.item(), ce + kl, 1e-12);
}

TEST(Objective, ToyExactSlopeLeavesOnlyKl) {
  const MetaModel m = MetaModel::create(ModelSpec::toy(), 0);
  const ModelView v = bind_constant(m);
  InferenceConfig cfg;
  const Episode ep = gen_spinning_lines(ToyConfig{}, 3);
  const Tensor theta = Tensor::matrix(1, 1, {ep.true_w});
  const auto obj = task_objective(ep, theta, ep.query_inputs, v, cfg, zero_noise());
  EXPECT_EQ(obj.data.item(), 0.0);
  const DiagGaussian q({ep.true_w}, {cfg.posterior.log_var});
  EXPECT_NEAR(obj.total.item(), kl_diag_gaussian(q, DiagGaussian::standard(1)), 1e-15);
}

TEST(Objective, LabelOutOfRangeThrows) {
  const MetaModel m = perturbed_model(ModelSpec::fewshot(3, 4, 4), 6);
  Episode ep = small_classification_episode(3, 4, 6, 2);
  ep.query_labels[0] = 7;
  InferenceConfig cfg = fewshot_inference();
  const ModelView v = bind_constant(m);
  EXPECT_THROW(task_objective(ep, Tensor::zeros({3, 4}), features(v, ep.query_inputs), v, cfg, zero_noise()), Error);
}

TEST(SslInit, ZeroEtaGivesLambda) {
  const MetaModel m = perturbed_model(ModelSpec::zeroshot(3, 4, 4), 7);
  const ModelView v = bind_constant(m);
  InferenceConfig cfg;
  cfg.ssl_eta = 0.0;
  CounterRng rng(12);
  const Tensor t0 = ssl_init(v, random_matrix(rng, 8, 4), cyclic_shift_labeler, cfg, zero_noise());
  EXPECT_EQ(t0.storage(), m.param("lambda.global").values);
}

TEST(SslInit, DependsOnQueryInputs) {
  const MetaModel m = perturbed_model(ModelSpec::zeroshot(3, 4, 4), 7);
  const ModelView v = bind_constant(m);
  InferenceConfig cfg;
  CounterRng rng(13);
  const Tensor a = ssl_init(v, random_matrix(rng, 8, 4), cyclic_shift_labeler, cfg, zero_noise());
  const Tensor b = ssl_init(v, random_matrix(rng, 8, 4), cyclic_shift_labeler, cfg, zero_noise());
  EXPECT_NE(a.storage(), b.storage());
}

TEST(SslInit, SmallStepDecreasesSelfSupervisedLoss) {
  const MetaModel m = perturbed_model(ModelSpec::zeroshot(3, 4, 4), 8);
  const ModelView v = bind_constant(m);
  InferenceConfig cfg;
  cfg.posterior.regime = PosteriorRegime::Deterministic;
  CounterRng rng(14);
  const Tensor fq = random_matrix(rng, 12, 4);
  const SslTask task = cyclic_shift_labeler(fq);
  const double at_lambda = ssl_loss(v, task, v["lambda.global"], cfg.posterior, zero_noise()).item();
  for (double eta : {1e-3, 1e-2}) {
    cfg.ssl_eta = eta;
    const Tensor t0 = ssl_init(v, fq, cyclic_shift_labeler, cfg, zero_noise());
    EXPECT_LT(ssl_loss(v, task, t0, cfg.posterior, zero_noise()).item(), at_lambda) << eta;
  }
}

TEST(SslInit, LabelerShiftsAndLabelsByIndex) {
  const Tensor f = Tensor::matrix(5, 4, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
  const SslTask t = cyclic_shift_labeler(f);
  EXPECT_EQ(t.labels, (std::vector<int>{0, 1, 2, 3, 0}));
  EXPECT_EQ(t.inputs.at(0, 0), 1.0);
  // Row i holds f shifted left by i % 4 places.
  EXPECT_EQ(t.inputs.at(1, 3), 1.0);
  EXPECT_EQ(t.inputs.at(2, 2), 1.0);
  EXPECT_EQ(t.inputs.at(3, 1), 1.0);
  EXPECT_EQ(t.inputs.at(1, 0), 2.0);
  EXPECT_EQ(t.inputs.at(4, 0), 1.0);
}

TEST(SslInit, OutOfRangeLabelsThrow) {
  const MetaModel m = perturbed_model(ModelSpec::zeroshot(3, 4, 4), 7);
  const ModelView v = bind_constant(m);
  InferenceConfig cfg;
  const SslLabeler bad = [](const Tensor& f) { return SslTask{f, std::vector<int>(f.rows(), 9)}; };
  CounterRng rng(15);
  EXPECT_THROW(ssl_init(v, random_matrix(rng, 4, 4), bad, cfg, zero_noise()), Error);
}

TEST(Features, DetachedInnerLoopSendsNoGradientToF) {
  const MetaModel m = perturbed_model(ModelSpec::zeroshot(3, 4, 4), 9);
  const Episode ep = small_classification_episode(3, 4, 6, 3);
  InferenceConfig cfg;
  cfg.inner.kl_in_inner = true;
  cfg.inner.detach_features = true;
  ad::Tape tape;
  const ModelView v = bind(m, tape, true);
  const auto post = build_posterior(adaptation_input(ep), v, cfg, zero_noise());
  const auto g = tape.backward(ad::sum(ad::square(post.theta))).values_of(v["f.weight"]);
  for (double x : g) EXPECT_EQ(x, 0.0);

  cfg.inner.detach_features = false;
  ad::Tape tape2;
  const ModelView v2 = bind(m, tape2, true);
  const auto post2 = build_posterior(adaptation_input(ep), v2, cfg, zero_noise());
  const auto g2 = tape2.backward(ad::sum(ad::square(post2.theta))).values_of(v2["f.weight"]);
  EXPECT_TRUE(std::any_of(g2.begin(), g2.end(), [](double x) { return x != 0.0; }));
}

TEST(Config, ValidationRejectsBadValues) {
  InferenceConfig cfg;
  cfg.inner.mc_samples = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = InferenceConfig{};
  cfg.inner.eta = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(data_term_from_string("median"), ConfigError);
}
