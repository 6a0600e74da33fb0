#pragma once

// Tape-based reverse-mode automatic differentiation over dense float64
// tensors of rank 0, 1 or 2.
//
// A Tensor is an immutable value (shape + shared row-major storage). Tensors
// created through Tape::leaf, or produced by an op from at least one taped
// input, carry a node id on that tape; everything else is a constant. The
// graph is rebuilt on every forward pass and is never mutated in place.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sib::ad {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tape;

class Tensor {
 public:
  /// A 0-d zero constant.
  Tensor();

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  /// Row-major m x n matrix.
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);
  static Tensor vector(std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return *data_; }
  const std::vector<double>& storage() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const;
  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  /// Node id on the owning tape; only meaningful when requires_grad().
  NodeId node() const { return node_; }

 private:
  friend class Tape;
  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> data,
         Tape* tape, NodeId node);

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  NodeId node_ = 0;
};

/// Accumulation buffers of an op's inputs during the backward sweep. Slot j
/// is empty when input j is a constant.
class InputGrads {
 public:
  explicit InputGrads(std::vector<std::vector<double>*> slots)
      : slots_(std::move(slots)) {}
  bool wants(std::size_t input) const { return slots_[input] != nullptr; }
  std::vector<double>& operator[](std::size_t input) { return *slots_[input]; }

 private:
  std::vector<std::vector<double>*> slots_;
};

/// Given the gradient of the output, accumulate into the input gradients.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, InputGrads& grads)>;

struct Node {
  std::string_view op;
  std::vector<NodeId> inputs;  // every input id precedes this node
  Shape shape;
  BackwardFn backward;  // empty for leaves
};

/// Gradients produced by one backward sweep.
class Gradients {
 public:
  /// Gradient of the differentiated output with respect to `t`. Zero when
  /// `t` is on the tape but does not influence the output. Throws when `t`
  /// is a constant or lives on another tape.
  Tensor of(const Tensor& t) const;
  std::vector<double> values_of(const Tensor& t) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A differentiable input (parameter) of this graph.
  Tensor leaf(Shape shape, std::vector<double> values);
  Tensor leaf(const Tensor& value);

  /// Registers the result of an op. Inputs that are constants are ignored;
  /// taped inputs must belong to this tape.
  Tensor record(std::string_view op, Shape shape, std::vector<double> values,
                std::span<const Tensor> inputs, BackwardFn backward);

  /// Reverse sweep from a 0-d output. Each node is visited at most once.
  Gradients backward(const Tensor& output);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

}  // namespace sib::ad
