#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <vector>

#include "sib/distributions.hpp"
#include "sib/rng.hpp"
#include "sib/tensor.hpp"

namespace sib {

/// Spinning-lines regression: x_i ~ N(mu, sigma^2), w = mean(x) + eps_w with
/// eps_w ~ N(mu_w, sigma_w^2), y_i = w * x_i.
struct ToyConfig {
  std::size_t n = 32;
  double mu = 0.0;
  double sigma = 1.0;
  double mu_w = 1.0;
  double sigma_w = 0.1;
  std::size_t n_train = 240;
  std::size_t n_test = 240;

  void validate() const;
};

/// Synthetic k-way n-shot benchmark over latent class prototypes.
struct FewShotConfig {
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries_per_class = 15;
  std::size_t dim = 16;
  std::size_t pool_train = 64;
  std::size_t pool_val = 16;
  std::size_t pool_test = 20;
  double cluster_spread = 0.3;
  std::uint64_t pool_seed_train = 1;
  std::uint64_t pool_seed_val = 2;
  std::uint64_t pool_seed_test = 3;
  /// Per-task feature offset scale of zero-shot (domain-shift) episodes.
  double domain_shift = 0.3;

  void validate() const;
  std::size_t pool_size(Split split) const;
};

enum class TaskKind { Regression, Classification };

/// One task. Regression episodes (the toy) carry targets and the slope w;
/// classification episodes carry integer labels 0..ways-1 and the class
/// prototypes. Support tensors have zero rows when there is no support set.
struct Episode {
  TaskKind kind = TaskKind::Regression;
  ad::Tensor support_inputs;
  std::vector<int> support_labels;
  std::vector<double> support_targets;
  ad::Tensor query_inputs;
  std::vector<int> query_labels;
  std::vector<double> query_targets;
  std::size_t ways = 0;
  double true_w = 0.0;
  ad::Tensor prototypes;
  std::uint64_t task_seed = 0;

  bool has_support() const { return support_inputs.rank() == 2 && support_inputs.rows() > 0; }
  std::size_t query_size() const { return query_inputs.rows(); }
  std::size_t input_dim() const { return query_inputs.cols(); }
};

Episode gen_spinning_lines(const ToyConfig& cfg, std::uint64_t task_seed);
/// A fresh dataset of an existing toy task: new inputs, same slope.
Episode resample_spinning_lines(const ToyConfig& cfg, double slope, std::uint64_t seed);
/// p(w) = N(mu + mu_w, sigma^2 / n + sigma_w^2).
DiagGaussian true_prior(const ToyConfig& cfg);
/// p(w | d) = N(mean(x) + mu_w, sigma_w^2).
DiagGaussian true_posterior(const Episode& ep, const ToyConfig& cfg);

/// The classes available to one split. Global class ids are disjoint across
/// the splits of one benchmark. A pool either holds prototypes only (points
/// are prototype + Gaussian noise) or, when ingested from CSV, explicit
/// example features per class.
struct ClassPool {
  std::size_t dim = 0;
  std::vector<std::uint64_t> class_ids;
  std::vector<std::vector<double>> prototypes;
  std::vector<std::vector<std::vector<double>>> examples;

  std::size_t size() const { return class_ids.size(); }
  bool has_examples() const { return !examples.empty(); }
};

/// Unit-norm random prototypes drawn from the split's pool seed.
ClassPool make_gaussian_pool(const FewShotConfig& cfg, Split split);

/// Reads `label,feat_0,...,feat_{d-1}` rows (with a header line). Classes
/// are ordered by label value; prototypes are class means. Class ids are
/// `first_class_id + rank of label`.
ClassPool load_pool_csv(std::istream& in, std::uint64_t first_class_id = 0);
ClassPool load_pool_csv(const std::filesystem::path& path, std::uint64_t first_class_id = 0);

class FewShotSampler {
 public:
  explicit FewShotSampler(FewShotConfig cfg);
  FewShotSampler(FewShotConfig cfg, ClassPool train, ClassPool val, ClassPool test);

  const FewShotConfig& config() const { return cfg_; }
  const ClassPool& pool(Split split) const;

  /// k classes without replacement from the split's pool, relabelled
  /// 0..k-1 in sampled order; support then query points grouped by label.
  Episode sample(Split split, std::uint64_t task_seed) const;
  /// Zero-shot episode: no support, the first `ways` training classes with
  /// fixed labels, every point shifted by a task-specific offset.
  Episode sample_zeroshot(Split split, std::uint64_t task_seed) const;

 private:
  FewShotConfig cfg_;
  ClassPool pools_[3];
};

Episode gen_fewshot_episode(const FewShotConfig& cfg, Split split, std::uint64_t task_seed);

}  // namespace sib
