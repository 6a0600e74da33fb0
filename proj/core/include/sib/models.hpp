#pragma once

// Meta-model parameters and the task-head networks built from them.
//
// Parameter names and groups:
//   f.weight           Feature   d_x x d_f linear feature map (absent when f is the identity)
//   lambda.global      Init      shape of theta; global initialization
//   lambda.scale       Init      1 x d_f; scaling of prototype initialization
//   ssl.weight/bias    Init      (k + d_f) x 4 and 1 x 4; self-supervised head
//   xi.w1 .. xi.b3     SynthGrad 3-layer MLP p -> h -> h -> p
//   psi.mean/log_var   Prior     1 x d_f (1 x 1 for the toy), broadcast over rows of theta
//   head.log_scale     Head      0-d; classifier scale = exp(head.log_scale)

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sib/distributions.hpp"
#include "sib/tensor.hpp"

namespace sib {

enum class TaskMode { Toy, FewShot, ZeroShot };

std::string_view to_string(TaskMode mode);
TaskMode task_mode_from_string(std::string_view name);

enum class ParamGroup { Prior, Init, SynthGrad, Head, Feature };

std::string_view to_string(ParamGroup group);

struct ModelSpec {
  TaskMode mode = TaskMode::Toy;
  std::size_t ways = 1;
  std::size_t input_dim = 1;
  std::size_t feature_dim = 1;
  std::size_t xi_hidden = 8;
  bool feature_identity = true;
  double classifier_scale = 10.0;
  std::size_t ssl_classes = 4;

  static ModelSpec toy();
  /// Hidden width of xi is 8 * ways.
  static ModelSpec fewshot(std::size_t ways, std::size_t input_dim, std::size_t feature_dim);
  static ModelSpec zeroshot(std::size_t ways, std::size_t input_dim, std::size_t feature_dim);

  /// Shape of theta: 1 x 1 for the toy, ways x d_f otherwise.
  ad::Shape theta_shape() const;
  void validate() const;
};

struct Param {
  std::string name;
  ParamGroup group = ParamGroup::Init;
  ad::Shape shape;
  std::vector<double> values;
};

class MetaModel {
 public:
  MetaModel(ModelSpec spec, std::vector<Param> params);
  /// Freshly initialized parameters; only the random parts depend on `seed`.
  static MetaModel create(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params() { return params_; }
  bool has(std::string_view name) const;
  const Param& param(std::string_view name) const;
  Param& param(std::string_view name);
  std::size_t num_values() const;

 private:
  ModelSpec spec_;
  std::vector<Param> params_;
};

/// Parameters of a MetaModel placed into one computation graph.
class ModelView {
 public:
  const ModelSpec& spec() const { return spec_; }
  bool has(std::string_view name) const;
  const ad::Tensor& operator[](std::string_view name) const;
  /// Names of the parameters bound as leaves, in model order.
  const std::vector<std::string>& trainable() const { return trainable_; }

 private:
  friend ModelView bind(const MetaModel&, ad::Tape*, const std::function<bool(const Param&)>&);
  friend ModelView detach_view(const ModelView&);
  friend ModelView make_view(const ModelSpec&, const std::vector<std::pair<std::string, ad::Tensor>>&);
  ModelSpec spec_;
  std::map<std::string, ad::Tensor, std::less<>> tensors_;
  std::vector<std::string> trainable_;
};

/// Parameters accepted by `trainable` become leaves of `tape`; the rest are
/// constants. With a null tape every parameter is a constant.
ModelView bind(const MetaModel& model, ad::Tape* tape,
               const std::function<bool(const Param&)>& trainable);
/// Everything trainable except the feature map unless `train_f`.
ModelView bind(const MetaModel& model, ad::Tape& tape, bool train_f = false);
ModelView bind_constant(const MetaModel& model);
/// Same values, every parameter a constant.
ModelView detach_view(const ModelView& view);
/// A view over caller-supplied tensors; taped tensors count as trainable.
ModelView make_view(const ModelSpec& spec, const std::vector<std::pair<std::string, ad::Tensor>>& tensors);

ad::Tensor features(const ModelView& model, const ad::Tensor& x);

ad::Tensor init_theta0_global(const ModelView& model);
/// Row c = lambda.scale * mean of the support features labelled c.
ad::Tensor init_theta0_proto(const ModelView& model, const ad::Tensor& support_features,
                             const std::vector<int>& labels, std::size_t ways);

/// xi(y_hat) row by row; y_hat is n x p.
ad::Tensor synth_grad(const ModelView& model, const ad::Tensor& y_hat);

inline constexpr double kCosineTau = 1e-12;

/// scale * <f_i, theta_c> / (|f_i| |theta_c| + tau); `scale` is 0-d.
ad::Tensor cosine_logits(const ad::Tensor& scale, const ad::Tensor& feats, const ad::Tensor& theta);
ad::Tensor cosine_predict(const ModelView& model, const ad::Tensor& feats, const ad::Tensor& theta);
/// Gradient with respect to theta of sum(g * cosine_logits(scale, feats, theta)),
/// written out in closed form so it stays differentiable.
ad::Tensor cosine_vjp(const ad::Tensor& scale, const ad::Tensor& feats, const ad::Tensor& theta,
                      const ad::Tensor& g);

/// y_hat = theta * x for a 1 x 1 theta and an n x 1 x.
ad::Tensor linear_predict_toy(const ad::Tensor& theta, const ad::Tensor& x);
/// sum_i g_i x_i as a 1 x 1 tensor.
ad::Tensor linear_vjp(const ad::Tensor& x, const ad::Tensor& g);

/// Task-head prediction and its vector-Jacobian product for the model's mode.
ad::Tensor predict(const ModelView& model, const ad::Tensor& feats, const ad::Tensor& theta);
ad::Tensor predict_vjp(const ModelView& model, const ad::Tensor& feats, const ad::Tensor& theta,
                       const ad::Tensor& g);

/// Prior p_psi broadcast to the shape of theta.
GaussianNode prior_node(const ModelView& model, const ad::Shape& theta_shape);
DiagGaussian prior_distribution(const MetaModel& model);

}  // namespace sib
