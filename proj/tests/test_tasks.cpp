#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>
#include <unordered_set>

#include "sib/error.hpp"
#include "sib/tasks.hpp"

using namespace sib;

TEST(SpinningLines, PaperSizes) {
  const ToyConfig cfg;
  const Episode ep = gen_spinning_lines(cfg, 1);
  EXPECT_EQ(ep.query_size(), 32u);
  EXPECT_FALSE(ep.has_support());
  EXPECT_EQ(ep.kind, TaskKind::Regression);
}

TEST(SpinningLines, TargetsAreExactlyLinear) {
  const ToyConfig cfg;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Episode ep = gen_spinning_lines(cfg, s);
    for (std::size_t i = 0; i < ep.query_size(); ++i) EXPECT_EQ(ep.query_targets[i], ep.true_w * ep.query_inputs[i]);
  }
}

TEST(SpinningLines, SlopeMeanMatchesGenerativeProcess) {
  const ToyConfig cfg;
  const std::size_t n = 100'000;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += gen_spinning_lines(cfg, derive_task_seed(5, Split::Train, i)).true_w;
  const double se = std::sqrt(true_prior(cfg).variance(0) / n);
  EXPECT_LT(std::abs(s / n - 1.0), 3.0 * se);
}

TEST(SpinningLines, PureFunctionOfSeed) {
  const ToyConfig cfg;
  const Episode a = gen_spinning_lines(cfg, 77), b = gen_spinning_lines(cfg, 77);
  EXPECT_EQ(a.query_inputs.storage(), b.query_inputs.storage());
  EXPECT_EQ(a.query_targets, b.query_targets);
  EXPECT_EQ(a.true_w, b.true_w);
}

TEST(SpinningLines, ResampleKeepsSlope) {
  const ToyConfig cfg;
  const Episode ep = resample_spinning_lines(cfg, 1.7, 3);
  EXPECT_EQ(ep.true_w, 1.7);
  for (std::size_t i = 0; i < ep.query_size(); ++i) EXPECT_EQ(ep.query_targets[i], 1.7 * ep.query_inputs[i]);
}

TEST(ToyConfigTest, Validation) {
  ToyConfig c;
  c.sigma = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ToyConfig{};
  c.sigma_w = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ToyConfig{};
  c.n = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TruePrior, PaperConfig) {
  const auto p = true_prior(ToyConfig{});
  EXPECT_DOUBLE_EQ(p.mean()[0], 1.0);
  EXPECT_NEAR(p.variance(0), 0.04125, 1e-15);
}

TEST(TruePrior, Limits) {
  ToyConfig c;
  c.sigma = 1e-9;
  EXPECT_NEAR(true_prior(c).variance(0), c.sigma_w * c.sigma_w, 1e-15);
  c = ToyConfig{};
  c.n = 1;
  c.sigma_w = 0.0;
  const auto p = true_prior(c);
  EXPECT_DOUBLE_EQ(p.mean()[0], c.mu_w);
  EXPECT_DOUBLE_EQ(p.variance(0), 1.0);
}

TEST(TruePosterior, ZeroInputs) {
  const ToyConfig cfg;
  Episode ep = gen_spinning_lines(cfg, 1);
  ep.query_inputs = ad::Tensor::zeros({cfg.n, 1});
  const auto q = true_posterior(ep, cfg);
  EXPECT_DOUBLE_EQ(q.mean()[0], 1.0);
  EXPECT_NEAR(q.variance(0), 0.01, 1e-15);
}

TEST(TruePosterior, MeanShiftEqualsInputMeanShift) {
  const ToyConfig cfg;
  const Episode ep = gen_spinning_lines(cfg, 9);
  double m = 0.0;
  for (double v : ep.query_inputs.values()) m += v;
  m /= static_cast<double>(cfg.n);
  EXPECT_NEAR(true_posterior(ep, cfg).mean()[0] - true_prior(cfg).mean()[0], m - cfg.mu, 1e-14);
}

TEST(TruePosterior, AverageKlToPriorMatchesSymbolicExpectation) {
  const ToyConfig cfg;
  // KL(N(m + mu_w, s_w^2) || N(mu + mu_w, v_p)) with m ~ N(mu, sigma^2 / n).
  const double vq = cfg.sigma_w * cfg.sigma_w;
  const double vp = cfg.sigma * cfg.sigma / cfg.n + vq;
  const double expected = 0.5 * (std::log(vp / vq) + vq / vp + (cfg.sigma * cfg.sigma / cfg.n) / vp - 1.0);
  EXPECT_NEAR(expected, 0.5 * std::log(4.125), 1e-12);
  const std::size_t n = 100'000;
  double s = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Episode ep = gen_spinning_lines(cfg, derive_task_seed(11, Split::Test, i));
    const double kl = kl_diag_gaussian(true_posterior(ep, cfg), true_prior(cfg));
    s += kl;
    ss += kl * kl;
  }
  const double mean = s / n, se = std::sqrt((ss / n - mean * mean) / n);
  EXPECT_LT(std::abs(mean - expected), 3.0 * se);
}

TEST(TaskSeed, DistinctAndCollisionFree) {
  for (std::uint64_t s = 0; s < 50; ++s) EXPECT_NE(derive_task_seed(s, Split::Train, 0), derive_task_seed(s, Split::Train, 1));
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(1'100'000);
  for (std::uint64_t i = 0; i < 400'000; ++i) {
    seen.insert(derive_task_seed(1, Split::Train, i));
    seen.insert(derive_task_seed(1, Split::Val, i));
  }
  for (std::uint64_t i = 0; i < 200'000; ++i) seen.insert(derive_task_seed(1, Split::Test, i));
  EXPECT_EQ(seen.size(), 1'000'000u);
}

TEST(TaskSeed, FrozenValues) {
  // Reference values from an independent big-integer reimplementation.
  EXPECT_EQ(mix64(1), 0x5692161D100B05E5ULL);
  EXPECT_EQ(derive_task_seed(0, Split::Train, 0), 0xBD348BA6858681E3ULL);
  EXPECT_EQ(derive_task_seed(42, Split::Val, 7), 0xB4BBB572E233925FULL);
  EXPECT_EQ(derive_task_seed(123456789, Split::Test, 1000), 0x91F860DE0750D406ULL);
}

TEST(FewShot, EpisodeSizes) {
  FewShotConfig cfg;
  const Episode ep = gen_fewshot_episode(cfg, Split::Train, 4);
  EXPECT_EQ(ep.support_inputs.rows(), 5u);
  EXPECT_EQ(ep.query_size(), 75u);
  EXPECT_EQ(ep.input_dim(), 16u);
  EXPECT_EQ(ep.prototypes.rows(), 5u);
}

TEST(FewShot, LabelsBalancedAndInRange) {
  FewShotConfig cfg;
  cfg.shots = 3;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Episode ep = gen_fewshot_episode(cfg, Split::Val, s);
    std::vector<int> support(cfg.ways, 0), query(cfg.ways, 0);
    for (int y : ep.support_labels) ++support.at(y);
    for (int y : ep.query_labels) ++query.at(y);
    for (std::size_t c = 0; c < cfg.ways; ++c) {
      EXPECT_EQ(support[c], 3);
      EXPECT_EQ(query[c], 15);
    }
  }
}

TEST(FewShot, ZeroSpreadPointsArePrototypes) {
  FewShotConfig cfg;
  cfg.cluster_spread = 0.0;
  const Episode ep = gen_fewshot_episode(cfg, Split::Test, 8);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ep.query_size(); ++i) {
    const int y = ep.query_labels[i];
    for (std::size_t j = 0; j < cfg.dim; ++j) EXPECT_EQ(ep.query_inputs.at(i, j), ep.prototypes.at(y, j));
    // Nearest-prototype classification.
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < cfg.ways; ++c) {
      double d = 0.0;
      for (std::size_t j = 0; j < cfg.dim; ++j) d += std::pow(ep.query_inputs.at(i, j) - ep.prototypes.at(c, j), 2);
      if (d < best_d) best_d = d, best = c;
    }
    correct += static_cast<int>(best) == y;
  }
  EXPECT_EQ(correct, ep.query_size());
}

TEST(FewShot, Deterministic) {
  FewShotConfig cfg;
  const Episode a = gen_fewshot_episode(cfg, Split::Train, 123), b = gen_fewshot_episode(cfg, Split::Train, 123);
  EXPECT_EQ(a.support_inputs.storage(), b.support_inputs.storage());
  EXPECT_EQ(a.query_inputs.storage(), b.query_inputs.storage());
  EXPECT_EQ(a.query_labels, b.query_labels);
}

TEST(FewShot, DisjointPoolsAndUnitPrototypes) {
  const FewShotSampler sampler(FewShotConfig{});
  std::set<std::uint64_t> all;
  std::size_t total = 0;
  for (auto s : {Split::Train, Split::Val, Split::Test}) {
    const auto& pool = sampler.pool(s);
    total += pool.size();
    all.insert(pool.class_ids.begin(), pool.class_ids.end());
    for (const auto& p : pool.prototypes) {
      double nrm = 0.0;
      for (double v : p) nrm += v * v;
      EXPECT_NEAR(nrm, 1.0, 1e-12);
    }
  }
  EXPECT_EQ(total, 100u);
  EXPECT_EQ(all.size(), total);
}

TEST(FewShot, TooManyWaysThrows) {
  FewShotConfig cfg;
  cfg.ways = 17;
  EXPECT_THROW(FewShotSampler{cfg}, Error);
}

TEST(FewShot, ZeroShotEpisodesHaveNoSupport) {
  const FewShotSampler sampler(FewShotConfig{});
  const Episode ep = sampler.sample_zeroshot(Split::Test, 3);
  EXPECT_FALSE(ep.has_support());
  EXPECT_EQ(ep.query_size(), 75u);
}

TEST(PoolCsv, LoadsClassesInLabelOrder) {
  std::istringstream in("label,feat_0,feat_1\n7,1,2\n3,0,0\n7,3,4\n3,2,2\n");
  const ClassPool pool = load_pool_csv(in, 100);
  ASSERT_EQ(pool.size(), 2u);
  EXPECT_EQ(pool.class_ids, (std::vector<std::uint64_t>{100, 101}));
  EXPECT_EQ(pool.prototypes[0], (std::vector<double>{1, 1}));
  EXPECT_EQ(pool.prototypes[1], (std::vector<double>{2, 3}));
  EXPECT_EQ(pool.examples[1].size(), 2u);
}

TEST(PoolCsv, RejectsMalformedInput) {
  std::istringstream bad_header("x,feat_0\n1,2\n");
  EXPECT_THROW(load_pool_csv(bad_header), IoError);
  std::istringstream bad_row("label,feat_0,feat_1\n1,2\n");
  EXPECT_THROW(load_pool_csv(bad_row), IoError);
  std::istringstream bad_value("label,feat_0\n1,abc\n");
  EXPECT_THROW(load_pool_csv(bad_value), IoError);
  EXPECT_THROW(load_pool_csv(std::filesystem::path("/nonexistent/pool.csv")), IoError);
}
