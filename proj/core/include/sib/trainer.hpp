#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sib/config.hpp"
#include "sib/models.hpp"
#include "sib/rng.hpp"
#include "sib/sibcore.hpp"
#include "sib/tasks.hpp"

namespace sib {

/// Deterministic episode stream of a run: episode i of a split always has
/// seed derive_task_seed(run seed, split, i).
class EpisodeSource {
 public:
  explicit EpisodeSource(const RunConfig& cfg);

  Episode get(Split split, std::uint64_t index) const;
  Episode from_seed(Split split, std::uint64_t task_seed) const;
  std::uint64_t seed_of(Split split, std::uint64_t index) const;

 private:
  TaskMode mode_;
  std::uint64_t run_seed_;
  ToyConfig toy_;
  std::shared_ptr<const FewShotSampler> sampler_;
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

/// Bias-corrected ADAM update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamHyper& hyper);
void sgd_step(std::span<double> params, std::span<const double> grads, double lr);

/// One gradient buffer per model parameter, in model order.
using GradientSet = std::vector<std::vector<double>>;

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
double clip_global_norm(GradientSet& grads, double max_norm);

class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const MetaModel& model);
  /// Updates the parameters accepted by `select`.
  void step(MetaModel& model, const GradientSet& grads, const std::function<bool(const Param&)>& select);

 private:
  OptimizerConfig cfg_;
  std::vector<AdamState> states_;
};

struct Metric {
  std::string name;
  double value = 0.0;
  double ci95 = 0.0;
};

struct MetricsRow {
  std::size_t step = 0;
  Split split = Split::Train;
  std::vector<Metric> metrics;
  double wall_time_ms = 0.0;

  const Metric* find(std::string_view name) const;
  double value(std::string_view name) const;
};

/// Writes `step,split,metric,value,ci95` lines; values in shortest
/// round-trip form.
class MetricsCsv {
 public:
  explicit MetricsCsv(std::ostream& out);
  void write(const MetricsRow& row);
  static constexpr const char* kHeader = "step,split,metric,value,ci95";

 private:
  std::ostream* out_;
};

std::string format_double(double v);

struct EpisodeEval {
  std::vector<Metric> metrics;  // ci95 unused
};

struct EvalResult {
  MetricsRow row;
  std::vector<EpisodeEval> episodes;
  bool degenerate = false;
};

/// Mean and 1.96 * standard error (sample standard deviation / sqrt(N));
/// N = 1 gives a zero half-width.
Metric aggregate(std::string name, std::span<const double> values);

/// Key of the noise stream used when evaluating the episode with this seed.
std::uint64_t eval_noise_key(std::uint64_t task_seed);

/// Metrics of one episode at the posterior mean theta^K.
EpisodeEval evaluate_episode(const MetaModel& model, const RunConfig& cfg, const Episode& ep);

/// Evaluates the first `episodes` episodes of `split`. No parameter is
/// modified.
EvalResult evaluate(const MetaModel& model, const RunConfig& cfg, Split split, std::size_t episodes,
                    std::size_t step = 0);

struct TrainOptions {
  std::function<void(const MetricsRow&)> on_row;
  /// Overrides the initial model (e.g. to resume).
  std::optional<MetaModel> initial;
};

struct TrainResult {
  MetaModel model;
  MetaModel best;
  std::size_t best_step = 0;
  double best_value = 0.0;
  std::size_t steps_done = 0;
  std::vector<MetricsRow> rows;
  bool aborted = false;
  std::string abort_reason;
};

/// Mean objective and averaged parameter gradients over a batch of episodes.
struct BatchGradient {
  double objective = 0.0;
  GradientSet grads;
};
BatchGradient batch_gradient(const MetaModel& model, const RunConfig& cfg, std::span<const Episode> episodes,
                             std::span<const std::uint64_t> noise_keys);

TrainResult train(const RunConfig& cfg, const TrainOptions& options = {});

/// Name of the model-selection metric for a mode and whether larger is better.
std::string selection_metric(TaskMode mode);

struct CheckpointInfo {
  std::uint64_t config_hash = 0;
  std::size_t step = 0;
};

struct LoadedCheckpoint {
  MetaModel model;
  CheckpointInfo info;
  bool hash_matched = true;
};

std::string checkpoint_to_string(const MetaModel& model, const CheckpointInfo& info);
void save_checkpoint(const MetaModel& model, const std::filesystem::path& path, const CheckpointInfo& info);
MetaModel checkpoint_from_string(const std::string& text, CheckpointInfo* info = nullptr);
/// Warns on `warn` (when given) if the stored config hash differs from
/// `expected_hash`.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash = {},
                                 std::ostream* warn = nullptr);

}  // namespace sib
