#pragma once

// Construction of the task posterior q_theta and the per-task objective.
//
// One SIB step on query features F (detached from f):
//   theta' = theta - eta * ( E_eps[ c * J_w(y_hat)^T xi(y_hat) ] + [kl_in_inner] (theta - mu) / s^2 )
// with y_hat = head(F, w), w = theta + sigma_q * eps and c = 1/n (or 1 with
// normalize_by_n off). The product J^T xi is written in closed form from
// differentiable ops, so outer gradients reach lambda, xi and psi through
// every unrolled step.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "sib/distributions.hpp"
#include "sib/models.hpp"
#include "sib/rng.hpp"
#include "sib/tasks.hpp"
#include "sib/tensor.hpp"

namespace sib {

struct InnerLoopConfig {
  std::size_t steps = 3;
  double eta = 1e-3;
  bool kl_in_inner = false;
  std::size_t mc_samples = 1;
  bool record_trajectory = false;
  /// Average the synthetic-gradient term over the n query points; off gives
  /// the plain sum.
  bool normalize_by_n = true;
  bool detach_features = true;

  void validate() const;
};

struct PosteriorConfig {
  PosteriorRegime regime = PosteriorRegime::Gaussian;
  /// Fixed log-variance of q in the Gaussian regime.
  double log_var = -4.605170185988091;  // ln 0.01
};

/// Mean: (1/n) sum of per-point losses (squared error or cross entropy).
/// Sum:  the full negative log-likelihood, sum of cross entropies or of
///       0.5 * squared error (unit-variance Gaussian likelihood).
enum class DataTerm { Mean, Sum };

enum class InitMethod { Global, Prototype, SelfSupervised };
enum class InnerMethod { Sib, Maml };

std::string_view to_string(DataTerm v);
std::string_view to_string(InitMethod v);
std::string_view to_string(InnerMethod v);
std::string_view to_string(PosteriorRegime v);
DataTerm data_term_from_string(std::string_view s);
InitMethod init_method_from_string(std::string_view s);
InnerMethod inner_method_from_string(std::string_view s);
PosteriorRegime posterior_regime_from_string(std::string_view s);

struct InferenceConfig {
  InnerLoopConfig inner;
  PosteriorConfig posterior;
  DataTerm data_term = DataTerm::Mean;
  InitMethod init = InitMethod::Global;
  InnerMethod method = InnerMethod::Sib;
  double ssl_eta = 0.1;

  void validate() const;
};

/// Draws reparameterization noise of a given shape.
using NoiseSource = std::function<ad::Tensor(const ad::Shape&)>;
NoiseSource gaussian_noise(CounterRng& rng);
NoiseSource zero_noise();

/// w = theta + exp(log_var / 2) * eps, or theta in the deterministic regime.
ad::Tensor sample_weights(const ad::Tensor& theta, const PosteriorConfig& posterior, const NoiseSource& noise);

struct Trajectory {
  std::vector<ad::Tensor> thetas;
  std::vector<double> kl_to_prior;
  /// Filled by fill_query_losses; empty until then.
  std::vector<double> query_loss;
};

struct UnrollResult {
  ad::Tensor theta;
  Trajectory trajectory;
};

ad::Tensor sib_step(const ad::Tensor& theta, const ad::Tensor& query_features, const ModelView& model,
                    const InferenceConfig& cfg, const NoiseSource& noise, std::size_t step_index = 0);
UnrollResult sib_unroll(const ad::Tensor& theta0, const ad::Tensor& query_features, const ModelView& model,
                        const InferenceConfig& cfg, const NoiseSource& noise);

/// The synthetic-gradient direction (without eta and the KL term) obtained by
/// backpropagating s = c * sum_i <detach(xi(y_hat_i)), y_hat_i> through a
/// private tape. Numeric only; used to cross-check sib_step.
std::vector<double> surrogate_direction(const ad::Tensor& theta, const ad::Tensor& query_features,
                                        const ModelView& model, const InferenceConfig& cfg,
                                        const ad::Tensor& eps);

/// Labels of one set of an episode.
struct Targets {
  TaskKind kind = TaskKind::Regression;
  std::size_t ways = 1;
  std::span<const int> labels;
  std::span<const double> values;

  std::size_t size() const { return kind == TaskKind::Classification ? labels.size() : values.size(); }
};
Targets query_targets(const Episode& ep);
Targets support_targets(const Episode& ep);

ad::Tensor data_loss(const ad::Tensor& y_hat, const Targets& targets, DataTerm term);
/// d data_loss / d y_hat in closed form.
ad::Tensor data_loss_grad(const ad::Tensor& y_hat, const Targets& targets, DataTerm term);

/// theta^{k+1} = theta^k - eta * E_eps[ d data_loss(support) / d theta ].
ad::Tensor maml_inner(const ad::Tensor& theta0, const ad::Tensor& support_features, const Targets& support,
                      const ModelView& model, const InferenceConfig& cfg, const NoiseSource& noise);

/// Self-supervised view of the query features: transformed inputs and their
/// transform ids.
struct SslTask {
  ad::Tensor inputs;
  std::vector<int> labels;
};
using SslLabeler = std::function<SslTask(const ad::Tensor& features)>;
/// Point i gets transform z = i mod 4: a cyclic shift of its feature vector
/// by z * max(1, d / 4) positions.
SslTask cyclic_shift_labeler(const ad::Tensor& features);

ad::Tensor ssl_loss(const ModelView& model, const SslTask& task, const ad::Tensor& theta,
                    const PosteriorConfig& posterior, const NoiseSource& noise);
/// theta0 = lambda - eta * grad_theta ssl_loss at lambda (closed form).
ad::Tensor ssl_init(const ModelView& model, const ad::Tensor& query_features, const SslLabeler& labeler,
                    const InferenceConfig& cfg, const NoiseSource& noise);

/// What posterior construction may look at: the support set and the query
/// inputs, never the query labels.
struct AdaptationInput {
  TaskKind kind = TaskKind::Regression;
  std::size_t ways = 1;
  ad::Tensor support_inputs;
  std::vector<int> support_labels;
  std::vector<double> support_values;
  ad::Tensor query_inputs;
};
AdaptationInput adaptation_input(const Episode& ep);

struct PosteriorResult {
  ad::Tensor theta0;
  ad::Tensor theta;
  /// f(x) of the query inputs, still attached to f.
  ad::Tensor query_features;
  Trajectory trajectory;
};

PosteriorResult build_posterior(const AdaptationInput& task, const ModelView& model, const InferenceConfig& cfg,
                                const NoiseSource& noise, const SslLabeler& labeler = cyclic_shift_labeler);

struct ObjectiveTerms {
  ad::Tensor data;
  ad::Tensor kl;
  ad::Tensor total;
};

/// Monte-Carlo data term on the query set plus KL(q || p_psi) (or its
/// point-mass surrogate in the deterministic regime).
ObjectiveTerms task_objective(const Episode& ep, const ad::Tensor& theta, const ad::Tensor& query_features,
                              const ModelView& model, const InferenceConfig& cfg, const NoiseSource& noise);

/// KL(q_theta || p_psi) for the Gaussian regime, prior_penalty otherwise.
ad::Tensor prior_term(const ad::Tensor& theta, const ModelView& model, const PosteriorConfig& posterior);

/// Query loss of every trajectory iterate, evaluated at the posterior mean.
void fill_query_losses(Trajectory& traj, const Episode& ep, const ad::Tensor& query_features,
                       const ModelView& model, DataTerm term);

}  // namespace sib
