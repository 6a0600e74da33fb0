#include "sib/tensor.hpp"

#include <fmt/format.h>

#include <cmath>

#include "sib/error.hpp"

namespace sib::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ","));
}

Tensor::Tensor()
    : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::shared_ptr<const std::vector<double>> data,
               Tape* tape, NodeId node)
    : shape_(std::move(shape)), data_(std::move(data)), tape_(tape), node_(node) {}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError(fmt::format("constant: shape {} holds {} values, got {}",
                                 to_string(shape), numel(shape), values.size()));
  }
  return Tensor(std::move(shape),
                std::make_shared<const std::vector<double>>(std::move(values)),
                nullptr, 0);
}

Tensor Tensor::scalar(double value) { return constant({}, {value}); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  return constant({rows, cols}, std::move(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  auto n = values.size();
  return constant({n}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows: tensor of shape " + to_string(shape_) + " is not 2-d");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols: tensor of shape " + to_string(shape_) + " is not 2-d");
  return shape_[1];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return (*data_)[r * cols() + c];
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not single-element");
  }
  return (*data_)[0];
}

Tensor Gradients::of(const Tensor& t) const {
  return Tensor::constant(t.shape(), values_of(t));
}

std::vector<double> Gradients::values_of(const Tensor& t) const {
  if (!t.requires_grad()) {
    throw Error("gradient requested for a constant tensor (not part of the graph)");
  }
  if (t.tape() != tape_) {
    throw Error("gradient requested for a tensor recorded on a different tape");
  }
  const auto& g = grads_.at(t.node());
  if (g.empty()) return std::vector<double>(t.size(), 0.0);
  return g;
}

Tensor Tape::leaf(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError(fmt::format("leaf: shape {} holds {} values, got {}",
                                 to_string(shape), numel(shape), values.size()));
  }
  NodeId id = nodes_.size();
  nodes_.push_back(Node{"leaf", {}, shape, {}});
  return Tensor(std::move(shape),
                std::make_shared<const std::vector<double>>(std::move(values)),
                this, id);
}

Tensor Tape::leaf(const Tensor& value) {
  return leaf(value.shape(), value.storage());
}

Tensor Tape::record(std::string_view op, Shape shape, std::vector<double> values,
                    std::span<const Tensor> inputs, BackwardFn backward) {
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape() != nullptr && in.tape() != this) {
      throw Error(fmt::format("{}: operands recorded on different tapes", op));
    }
    // Constants get a sentinel id so slot positions match the op's inputs.
    ids.push_back(in.requires_grad() ? in.node() : static_cast<NodeId>(-1));
  }
  NodeId id = nodes_.size();
  nodes_.push_back(Node{op, std::move(ids), shape, std::move(backward)});
  return Tensor(std::move(shape),
                std::make_shared<const std::vector<double>>(std::move(values)),
                this, id);
}

Gradients Tape::backward(const Tensor& output) {
  if (output.rank() != 0) {
    throw ShapeError("backward: output must be 0-d, got shape " + to_string(output.shape()));
  }
  if (output.tape() != this) {
    throw Error("backward: output is not recorded on this tape");
  }
  Gradients result;
  result.tape_ = this;
  result.grads_.assign(nodes_.size(), {});
  result.grads_[output.node()] = {1.0};
  last_visits_ = 0;

  constexpr auto kConstant = static_cast<NodeId>(-1);
  for (NodeId id = output.node() + 1; id-- > 0;) {
    auto& g = result.grads_[id];
    const Node& node = nodes_[id];
    if (g.empty() || !node.backward) continue;
    ++last_visits_;
    std::vector<std::vector<double>*> slots;
    slots.reserve(node.inputs.size());
    for (NodeId in : node.inputs) {
      if (in == kConstant) {
        slots.push_back(nullptr);
        continue;
      }
      auto& buf = result.grads_[in];
      if (buf.empty()) buf.assign(numel(nodes_[in].shape), 0.0);
      slots.push_back(&buf);
    }
    InputGrads input_grads(std::move(slots));
    node.backward(g, input_grads);
  }
  return result;
}

}  // namespace sib::ad
