#pragma once

#include <span>
#include <vector>

#include "sib/tensor.hpp"

namespace sib {

/// Diagonal Gaussian N(mean, diag(exp(log_var))).
class DiagGaussian {
 public:
  DiagGaussian(std::vector<double> mean, std::vector<double> log_var);
  static DiagGaussian from_variance(std::vector<double> mean, const std::vector<double>& variance);
  static DiagGaussian standard(std::size_t dim);

  std::size_t dim() const { return mean_.size(); }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& log_var() const { return log_var_; }
  double variance(std::size_t i) const;

 private:
  std::vector<double> mean_;
  std::vector<double> log_var_;
};

/// Closed-form KL(q || p).
double kl_diag_gaussian(const DiagGaussian& q, const DiagGaussian& p);
/// Closed-form cross entropy E_q[-log p(w)].
double cross_entropy(const DiagGaussian& q, const DiagGaussian& p);
/// w = mean + exp(log_var / 2) * eps.
std::vector<double> sample_reparam(const DiagGaussian& q, std::span<const double> eps);
double log_prob(const DiagGaussian& q, std::span<const double> w);

/// How the variational posterior q_theta is parameterised.
///   Gaussian:      q = N(theta, exp(log_var)) with a fixed log-variance.
///   Deterministic: q is a point mass at theta; the KL term is replaced by the
///                  negative log prior density without its 2*pi constant.
enum class PosteriorRegime { Gaussian, Deterministic };

/// Differentiable Gaussian parameters; `mean` and `log_var` share a shape.
struct GaussianNode {
  ad::Tensor mean;
  ad::Tensor log_var;
};

ad::Tensor kl_diag_gaussian(const GaussianNode& q, const GaussianNode& p);
ad::Tensor sample_reparam(const GaussianNode& q, const ad::Tensor& eps);

/// sum((theta - mu)^2 / (2 sigma^2) + log(sigma^2) / 2): the point-mass
/// surrogate of KL(q || p) in the deterministic regime.
ad::Tensor prior_penalty(const ad::Tensor& theta, const GaussianNode& p);

/// Closed-form gradient of KL(N(theta, s^2) || p) (and of prior_penalty) with
/// respect to theta: (theta - mu) / sigma^2. Built from differentiable ops so
/// outer gradients can flow through it to theta, mu and log sigma^2.
ad::Tensor kl_grad_wrt_mean(const ad::Tensor& theta, const GaussianNode& p);

}  // namespace sib
