#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "sib/models.hpp"
#include "sib/sibcore.hpp"
#include "sib/tasks.hpp"

namespace sib {

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global-norm clipping threshold; 0 disables clipping.
  double clip_norm = 10.0;
};

struct AnalysisConfig {
  std::size_t gen_gap_trials = 2000;
  std::size_t fresh_datasets = 4;
  /// Subgaussian parameter; unset means half the observed loss range.
  std::optional<double> sigma;
  std::size_t bound_seeds = 10;
  std::vector<std::size_t> sweep_n = {4, 8, 16, 32};
  std::size_t sweep_seeds = 5;
};

struct RunConfig {
  TaskMode mode = TaskMode::Toy;
  std::uint64_t seed = 0;
  InferenceConfig inference;
  /// Unset: ln(toy.sigma_w^2) in toy mode.
  std::optional<double> posterior_log_var;
  OptimizerConfig optimizer;
  std::size_t batch_tasks = 8;
  /// Toy: passes over the fixed training tasks.
  std::size_t epochs = 150;
  /// Few-shot: outer steps.
  std::size_t steps = 5000;
  /// Toy: in epochs; few-shot: in steps.
  std::size_t eval_every = 1;
  std::size_t val_episodes = 200;
  std::size_t test_episodes = 2000;
  bool sequential_updates = false;
  bool train_f = false;
  std::size_t feature_dim = 16;
  ToyConfig toy;
  FewShotConfig fewshot;
  std::string train_pool_csv;
  std::string val_pool_csv;
  std::string test_pool_csv;
  AnalysisConfig analysis;

  void validate() const;
  ModelSpec model_spec() const;
  /// Inference settings with the posterior log-variance resolved.
  InferenceConfig effective_inference() const;
};

/// Paper-style defaults for each mode.
RunConfig default_config(TaskMode mode);

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Applies `j` on top of the defaults of its "mode" (or of `base_mode`).
/// Unknown keys and mistyped values raise ConfigError naming the key and the
/// expected type.
RunConfig config_from_json(const nlohmann::json& j, TaskMode base_mode = TaskMode::Toy);
/// Sets one dotted key (e.g. "inner.steps") from its textual value.
void apply_override(nlohmann::json& j, const std::string& dotted_key, const std::string& value);

/// FNV-1a 64 of the canonical JSON text.
std::uint64_t config_hash(const RunConfig& cfg);
std::string hash_hex(std::uint64_t h);

}  // namespace sib
