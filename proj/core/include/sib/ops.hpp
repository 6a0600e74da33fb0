#pragma once

// Differentiable operations. Every op checks operand shapes and throws
// sib::ShapeError naming the op and the offending shapes. A result is
// recorded on the tape of its taped operands; if all operands are
// constants the result is a constant.

#include <cstddef>
#include <vector>

#include "sib/tensor.hpp"

namespace sib::ad {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Derivative at 0 is taken as 0.
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);

/// (m x k) * (k x n).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Along the last axis.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);

/// Full reductions to a 0-d tensor.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// 2-d reduction keeping the reduced axis with extent 1.
Tensor sum_axis(const Tensor& a, std::size_t axis);

/// Numpy-style broadcast of a 0-d, 1-d or 2-d tensor to `shape`.
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, const Shape& shape);
/// Concatenation of 1-d tensors (axis 0) or 2-d tensors (axis 0 or 1).
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Selects entries of a 1-d tensor or rows of a 2-d tensor; indices may repeat.
Tensor index_select(const Tensor& a, const std::vector<std::size_t>& indices);

/// Same values, cut from the graph: no gradient flows through the result.
Tensor detach(const Tensor& a);

// Convenience operators.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace sib::ad
