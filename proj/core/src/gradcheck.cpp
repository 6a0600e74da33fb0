#include "sib/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sib::ad {
namespace {

double evaluate(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(tape.leaf(in));
  return fn(tape, leaves).item();
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

std::vector<double> finite_difference(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                      std::size_t which, double h) {
  std::vector<double> grad(inputs[which].size());
  auto perturbed = inputs;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    auto values = inputs[which].storage();
    const double x = values[i];
    values[i] = x + h;
    perturbed[which] = Tensor::constant(inputs[which].shape(), values);
    const double up = evaluate(fn, perturbed);
    values[i] = x - h;
    perturbed[which] = Tensor::constant(inputs[which].shape(), values);
    const double down = evaluate(fn, perturbed);
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

GradCheckResult check_gradients(const std::string& name, const ScalarFn& fn,
                                const std::vector<Tensor>& inputs, double h, double tolerance) {
  Tape tape;
  std::vector<Tensor> leaves;
  for (const auto& in : inputs) leaves.push_back(tape.leaf(in));
  auto grads = tape.backward(fn(tape, leaves));

  GradCheckResult result{name, 0.0, true};
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = grads.values_of(leaves[k]);
    const auto numeric = finite_difference(fn, inputs, k, h);
    std::vector<double> diff(analytic.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
    const double scale = std::max(norm(analytic), norm(numeric));
    const double err = scale < 1e-10 ? norm(diff) : norm(diff) / scale;
    result.max_rel_error = std::max(result.max_rel_error, err);
  }
  result.passed = result.max_rel_error < tolerance;
  return result;
}

}  // namespace sib::ad
