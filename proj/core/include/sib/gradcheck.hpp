#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sib/tensor.hpp"

namespace sib::ad {

/// Builds a 0-d output from the given leaves on the given tape.
using ScalarFn = std::function<Tensor(Tape& tape, const std::vector<Tensor>& leaves)>;

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// Compares reverse-mode gradients of `fn` against central finite differences
/// with step `h`. The error of each input is ||auto - fd|| / max(||auto||, ||fd||)
/// (absolute when both norms are below 1e-10); the check passes when every
/// input's error is below `tolerance`.
GradCheckResult check_gradients(const std::string& name, const ScalarFn& fn,
                                const std::vector<Tensor>& inputs, double h = 1e-5,
                                double tolerance = 1e-6);

/// Central finite-difference gradient of `fn` with respect to input `which`.
std::vector<double> finite_difference(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                      std::size_t which, double h);

}  // namespace sib::ad
