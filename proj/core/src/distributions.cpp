#include "sib/distributions.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>

#include "sib/error.hpp"
#include "sib/ops.hpp"

namespace sib {
namespace {

void require_dim(const char* op, std::size_t a, std::size_t b) {
  if (a != b) throw ShapeError(fmt::format("{}: dimension mismatch {} vs {}", op, a, b));
}

}  // namespace

DiagGaussian::DiagGaussian(std::vector<double> mean, std::vector<double> log_var)
    : mean_(std::move(mean)), log_var_(std::move(log_var)) {
  require_dim("DiagGaussian", mean_.size(), log_var_.size());
  for (double lv : log_var_) {
    const double v = std::exp(lv);
    if (!std::isfinite(v) || v <= 0.0) {
      throw NumericError(fmt::format("DiagGaussian: log-variance {} gives a non-positive or infinite variance", lv));
    }
  }
}

DiagGaussian DiagGaussian::from_variance(std::vector<double> mean, const std::vector<double>& variance) {
  std::vector<double> lv(variance.size());
  for (std::size_t i = 0; i < lv.size(); ++i) lv[i] = std::log(variance[i]);
  return DiagGaussian(std::move(mean), std::move(lv));
}

DiagGaussian DiagGaussian::standard(std::size_t dim) {
  return DiagGaussian(std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0));
}

double DiagGaussian::variance(std::size_t i) const { return std::exp(log_var_[i]); }

double kl_diag_gaussian(const DiagGaussian& q, const DiagGaussian& p) {
  require_dim("kl_diag_gaussian", q.dim(), p.dim());
  double kl = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double d = q.mean()[i] - p.mean()[i];
    kl += 0.5 * (p.log_var()[i] - q.log_var()[i] + (q.variance(i) + d * d) / p.variance(i) - 1.0);
  }
  return kl;
}

double cross_entropy(const DiagGaussian& q, const DiagGaussian& p) {
  require_dim("cross_entropy", q.dim(), p.dim());
  double h = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double d = q.mean()[i] - p.mean()[i];
    h += 0.5 * (std::log(2.0 * std::numbers::pi) + p.log_var()[i] + (q.variance(i) + d * d) / p.variance(i));
  }
  return h;
}

std::vector<double> sample_reparam(const DiagGaussian& q, std::span<const double> eps) {
  require_dim("sample_reparam", q.dim(), eps.size());
  std::vector<double> w(q.dim());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = q.mean()[i] + std::exp(0.5 * q.log_var()[i]) * eps[i];
  return w;
}

double log_prob(const DiagGaussian& q, std::span<const double> w) {
  require_dim("log_prob", q.dim(), w.size());
  double lp = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w[i] - q.mean()[i];
    lp -= 0.5 * (std::log(2.0 * std::numbers::pi) + q.log_var()[i] + d * d / q.variance(i));
  }
  return lp;
}

namespace {

void require_same(const char* op, const ad::Tensor& a, const ad::Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, ad::to_string(a.shape()),
                                 ad::to_string(b.shape())));
  }
}

}  // namespace

ad::Tensor kl_diag_gaussian(const GaussianNode& q, const GaussianNode& p) {
  using namespace ad;
  require_same("kl_diag_gaussian", q.mean, p.mean);
  require_same("kl_diag_gaussian", q.log_var, p.log_var);
  require_same("kl_diag_gaussian", q.mean, q.log_var);
  const Tensor diff = q.mean - p.mean;
  const Tensor ratio = (exp(q.log_var) + square(diff)) / exp(p.log_var);
  return scale(sum(add_scalar(p.log_var - q.log_var + ratio, -1.0)), 0.5);
}

ad::Tensor sample_reparam(const GaussianNode& q, const ad::Tensor& eps) {
  using namespace ad;
  require_same("sample_reparam", q.mean, eps);
  return q.mean + exp(scale(q.log_var, 0.5)) * eps;
}

ad::Tensor prior_penalty(const ad::Tensor& theta, const GaussianNode& p) {
  using namespace ad;
  require_same("prior_penalty", theta, p.mean);
  require_same("prior_penalty", theta, p.log_var);
  return scale(sum(square(theta - p.mean) / exp(p.log_var) + p.log_var), 0.5);
}

ad::Tensor kl_grad_wrt_mean(const ad::Tensor& theta, const GaussianNode& p) {
  using namespace ad;
  require_same("kl_grad_wrt_mean", theta, p.mean);
  require_same("kl_grad_wrt_mean", theta, p.log_var);
  return (theta - p.mean) / exp(p.log_var);
}

}  // namespace sib
