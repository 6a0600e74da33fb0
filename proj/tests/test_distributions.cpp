#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "sib/distributions.hpp"
#include "sib/error.hpp"
#include "sib/gradcheck.hpp"
#include "sib/ops.hpp"
#include "sib/rng.hpp"

using namespace sib;

namespace {

// Monte-Carlo KL(q || p) from samples of q, computed with textbook densities.
struct McResult {
  double mean;
  double se;
};

McResult mc_kl_1d(double mq, double vq, double mp, double vp, std::size_t draws, std::uint64_t seed) {
  auto logpdf = [](double x, double m, double v) {
    return -0.5 * std::log(2.0 * std::numbers::pi * v) - (x - m) * (x - m) / (2.0 * v);
  };
  CounterRng rng(seed);
  double s = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    const double x = mq + std::sqrt(vq) * rng.normal();
    const double r = logpdf(x, mq, vq) - logpdf(x, mp, vp);
    s += r;
    ss += r * r;
  }
  const double n = static_cast<double>(draws);
  const double mean = s / n;
  return {mean, std::sqrt((ss / n - mean * mean) / n)};
}

}  // namespace

TEST(Kl, IdenticalIsZero) {
  EXPECT_EQ(kl_diag_gaussian(DiagGaussian({0.0}, {0.0}), DiagGaussian({0.0}, {0.0})), 0.0);
}

TEST(Kl, MeanShift) {
  EXPECT_DOUBLE_EQ(kl_diag_gaussian(DiagGaussian({1.0}, {0.0}), DiagGaussian::standard(1)), 0.5);
}

TEST(Kl, QuarterVarianceMatchesMonteCarloOracle) {
  const double kl = kl_diag_gaussian(DiagGaussian::from_variance({0.0}, {0.25}), DiagGaussian::standard(1));
  EXPECT_NEAR(kl, 0.318147, 5e-7);
  const auto mc = mc_kl_1d(0.0, 0.25, 0.0, 1.0, 10'000'000, 2024);
  EXPECT_LT(std::abs(mc.mean - 0.318147), 3.0 * mc.se) << mc.mean << " +- " << mc.se;
}

TEST(Kl, NonNegativeOnRandomPairsAndZeroOnlyWhenEqual) {
  CounterRng rng(3);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> m1(3), l1(3), m2(3), l2(3);
    for (int j = 0; j < 3; ++j) {
      m1[j] = rng.normal();
      l1[j] = rng.normal();
      m2[j] = rng.normal();
      l2[j] = rng.normal();
    }
    const DiagGaussian q(m1, l1), p(m2, l2);
    EXPECT_GT(kl_diag_gaussian(q, p), 0.0);
    EXPECT_NEAR(kl_diag_gaussian(q, q), 0.0, 1e-12);
  }
}

TEST(Kl, DimensionMismatchThrows) {
  EXPECT_THROW(kl_diag_gaussian(DiagGaussian::standard(2), DiagGaussian::standard(3)), Error);
  EXPECT_THROW(DiagGaussian({0.0, 1.0}, {0.0}), Error);
}

TEST(Kl, DifferentiableFormAgreesWithValueForm) {
  const DiagGaussian q({0.3, -1.0}, {0.2, -0.7}), p({1.1, 0.4}, {-0.3, 0.5});
  const GaussianNode qn{ad::Tensor::vector(q.mean()), ad::Tensor::vector(q.log_var())};
  const GaussianNode pn{ad::Tensor::vector(p.mean()), ad::Tensor::vector(p.log_var())};
  EXPECT_NEAR(kl_diag_gaussian(qn, pn).item(), kl_diag_gaussian(q, p), 1e-15);
}

TEST(Kl, GradientWrtMeanMatchesFiniteDifferences) {
  const ad::ScalarFn fn = [](ad::Tape&, const std::vector<ad::Tensor>& l) {
    return kl_diag_gaussian(GaussianNode{l[0], ad::Tensor::vector({0.2, -0.4})},
                            GaussianNode{ad::Tensor::vector({0.5, 1.0}), ad::Tensor::vector({0.1, 0.3})});
  };
  const auto r = ad::check_gradients("kl_mean", fn, {ad::Tensor::vector({-0.3, 0.8})}, 1e-5, 1e-8);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Kl, ClosedFormGradientHelper) {
  // d/dtheta KL(N(theta, s) || N(mu, sigma^2)) = (theta - mu) / sigma^2.
  const GaussianNode p{ad::Tensor::vector({0.5}), ad::Tensor::vector({std::log(4.0)})};
  EXPECT_DOUBLE_EQ(kl_grad_wrt_mean(ad::Tensor::vector({2.5}), p).item(), 0.5);
}

TEST(Reparam, ZeroNoiseGivesMean) {
  const DiagGaussian q({1.0, -2.0}, {0.3, 0.1});
  EXPECT_EQ(sample_reparam(q, std::vector<double>{0.0, 0.0}), q.mean());
}

TEST(Reparam, JacobianWrtMeanIsIdentity) {
  const auto lv = ad::Tensor::vector({0.0, 1.0, -1.0});
  const auto eps = ad::Tensor::vector({0.5, -0.2, 1.3});
  for (std::size_t i = 0; i < 3; ++i) {
    ad::Tape tape;
    const auto m = tape.leaf({3}, {0.1, 0.2, 0.3});
    const auto w = sample_reparam(GaussianNode{m, lv}, eps);
    const auto gv = tape.backward(ad::sum(ad::index_select(w, {i}))).values_of(m);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(gv[j], i == j ? 1.0 : 0.0);
  }
}

TEST(Reparam, MomentsMatchMonteCarlo) {
  const DiagGaussian q({0.7}, {std::log(2.5)});
  CounterRng rng(8);
  const std::size_t n = 1'000'000;
  double s = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = rng.normal();
    const double w = sample_reparam(q, std::vector<double>{e})[0];
    s += w;
    ss += w * w;
  }
  const double mean = s / n, var = ss / n - mean * mean;
  EXPECT_LT(std::abs(mean - 0.7), 3.0 * std::sqrt(2.5 / n));
  // Var of the sample variance of a Gaussian is 2 sigma^4 / n.
  EXPECT_LT(std::abs(var - 2.5), 3.0 * std::sqrt(2.0 * 2.5 * 2.5 / n));
}

TEST(Reparam, DimensionMismatchThrows) {
  EXPECT_THROW(sample_reparam(DiagGaussian::standard(2), std::vector<double>{0.0}), Error);
}

TEST(LogProb, StandardNormalAtMode) {
  EXPECT_DOUBLE_EQ(log_prob(DiagGaussian::standard(1), std::vector<double>{0.0}),
                   -0.5 * std::log(2.0 * std::numbers::pi));
}

TEST(LogProb, OneSigmaDrop) {
  const DiagGaussian q({1.3}, {std::log(0.7)});
  const double s = std::sqrt(0.7);
  EXPECT_NEAR(log_prob(q, std::vector<double>{1.3}) - log_prob(q, std::vector<double>{1.3 + s}), 0.5, 1e-14);
}

TEST(LogProb, IntegratesToOneOnGrid) {
  const DiagGaussian q({0.4}, {std::log(0.3)});
  const double lo = 0.4 - 12.0, hi = 0.4 + 12.0;
  const std::size_t steps = 200000;
  const double h = (hi - lo) / steps;
  double total = 0.0;
  for (std::size_t i = 0; i <= steps; ++i) {
    const double wgt = (i == 0 || i == steps) ? 0.5 : 1.0;
    total += wgt * std::exp(log_prob(q, std::vector<double>{lo + h * i}));
  }
  EXPECT_NEAR(total * h, 1.0, 1e-6);
}

TEST(LogProb, DimensionMismatchThrows) {
  EXPECT_THROW(log_prob(DiagGaussian::standard(2), std::vector<double>{0.0}), Error);
}

TEST(CrossEntropy, MonteCarloConvergesToClosedForm) {
  const DiagGaussian q({0.2, -0.5}, {-0.4, 0.3}), p({1.0, 0.0}, {0.5, -0.2});
  CounterRng rng(17);
  const std::size_t n = 400'000;
  double s = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> eps{rng.normal(), rng.normal()};
    const double v = -log_prob(p, sample_reparam(q, eps));
    s += v;
    ss += v * v;
  }
  const double mean = s / n, se = std::sqrt((ss / n - mean * mean) / n);
  EXPECT_LT(std::abs(mean - cross_entropy(q, p)), 3.0 * se);
}

TEST(PriorPenalty, MatchesFormula) {
  const ad::Tensor theta = ad::Tensor::vector({1.0, -2.0});
  const GaussianNode p{ad::Tensor::vector({0.0, 1.0}), ad::Tensor::vector({std::log(2.0), 0.0})};
  const double expected = 1.0 / 4.0 + 0.5 * std::log(2.0) + 9.0 / 2.0 + 0.0;
  EXPECT_NEAR(prior_penalty(theta, p).item(), expected, 1e-15);
}
