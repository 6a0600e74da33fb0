#include "sib/ops.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "sib/error.hpp"

namespace sib::ad {
namespace {

[[noreturn]] void shape_error(std::string_view op, const Tensor& a, const Tensor& b) {
  throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op,
                               to_string(a.shape()), to_string(b.shape())));
}

[[noreturn]] void shape_error(std::string_view op, const Tensor& a, std::string_view why) {
  throw ShapeError(fmt::format("{}: {} (shape {})", op, why, to_string(a.shape())));
}

void check_finite([[maybe_unused]] std::string_view op,
                  [[maybe_unused]] const std::vector<double>& values) {
#ifdef SIB_CHECK_FINITE
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(fmt::format("{}: non-finite value in forward pass", op));
  }
#endif
}

Tensor finish(std::string_view op, Shape shape, std::vector<double> values,
              std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(op, values);
  Tape* tape = nullptr;
  for (const auto& in : inputs) {
    if (in.tape() == nullptr) continue;
    if (tape != nullptr && tape != in.tape()) {
      throw Error(fmt::format("{}: operands recorded on different tapes", op));
    }
    tape = in.tape();
  }
  if (tape == nullptr) return Tensor::constant(std::move(shape), std::move(values));
  return tape->record(op, std::move(shape), std::move(values), inputs, std::move(backward));
}

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a, b);
}

void require_2d(std::string_view op, const Tensor& a) {
  if (a.rank() != 2) shape_error(op, a, "expected a 2-d tensor");
}

template <typename F, typename D>
Tensor unary(std::string_view op, const Tensor& a, F forward, D derivative) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = forward(a[i]);
  auto y = std::make_shared<std::vector<double>>(out);
  return finish(op, a.shape(), std::move(out), {a},
                [a, y, derivative](std::span<const double> g, InputGrads& grads) {
                  auto& ga = grads[0];
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * derivative(a[i], (*y)[i]);
                });
}

// Maps every flat index of `target` to the flat index of `source` under
// right-aligned broadcasting.
std::vector<std::size_t> broadcast_index(const Shape& source, const Shape& target) {
  const std::size_t rank = target.size();
  Shape padded(rank - source.size(), 1);
  padded.insert(padded.end(), source.begin(), source.end());
  std::vector<std::size_t> src_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = rank; i-- > 0;) {
    src_stride[i] = padded[i] == 1 ? 0 : stride;
    stride *= padded[i];
  }
  std::vector<std::size_t> index(numel(target));
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t flat = 0; flat < index.size(); ++flat) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < rank; ++i) s += counter[i] * src_stride[i];
    index[flat] = s;
    for (std::size_t i = rank; i-- > 0;) {
      if (++counter[i] < target[i]) break;
      counter[i] = 0;
    }
  }
  return index;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return finish("add", a.shape(), std::move(out), {a, b},
                [](std::span<const double> g, InputGrads& grads) {
                  for (std::size_t j = 0; j < 2; ++j) {
                    if (!grads.wants(j)) continue;
                    auto& gj = grads[j];
                    for (std::size_t i = 0; i < g.size(); ++i) gj[i] += g[i];
                  }
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return finish("sub", a.shape(), std::move(out), {a, b},
                [](std::span<const double> g, InputGrads& grads) {
                  if (grads.wants(0)) {
                    auto& ga = grads[0];
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  }
                  if (grads.wants(1)) {
                    auto& gb = grads[1];
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                  }
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return finish("mul", a.shape(), std::move(out), {a, b},
                [a, b](std::span<const double> g, InputGrads& grads) {
                  if (grads.wants(0)) {
                    auto& ga = grads[0];
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
                  }
                  if (grads.wants(1)) {
                    auto& gb = grads[1];
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
                  }
                });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same("div", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return finish("div", a.shape(), std::move(out), {a, b},
                [a, b](std::span<const double> g, InputGrads& grads) {
                  if (grads.wants(0)) {
                    auto& ga = grads[0];
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / b[i];
                  }
                  if (grads.wants(1)) {
                    auto& gb = grads[1];
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * a[i] / (b[i] * b[i]);
                  }
                });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary("add_scalar", a, [offset](double x) { return x + offset; },
               [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) shape_error("matmul", a, b);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * b[p * n + j];
    }
  }
  return finish("matmul", {m, n}, std::move(out), {a, b},
                [a, b, m, k, n](std::span<const double> g, InputGrads& grads) {
                  if (grads.wants(0)) {
                    auto& ga = grads[0];  // g * b^T
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * b[p * n + j];
                        ga[i * k + p] += s;
                      }
                  }
                  if (grads.wants(1)) {
                    auto& gb = grads[1];  // a^T * g
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        const double aip = a[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                      }
                  }
                });
}

Tensor transpose(const Tensor& a) {
  require_2d("transpose", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return finish("transpose", {n, m}, std::move(out), {a},
                [m, n](std::span<const double> g, InputGrads& grads) {
                  auto& ga = grads[0];
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                });
}

namespace {

std::size_t last_extent(std::string_view op, const Tensor& a) {
  if (a.rank() == 0) shape_error(op, a, "needs at least one axis");
  const std::size_t n = a.shape().back();
  if (n == 0) shape_error(op, a, "empty last axis");
  return n;
}

}  // namespace

Tensor softmax(const Tensor& a) {
  const std::size_t n = last_extent("softmax", a);
  const std::size_t rows = a.size() / n;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.values().data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[r * n + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return finish("softmax", a.shape(), std::move(out), {a},
                [y, rows, n](std::span<const double> g, InputGrads& grads) {
                  auto& ga = grads[0];
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * (*y)[r * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                      ga[r * n + j] += (*y)[r * n + j] * (g[r * n + j] - dot);
                  }
                });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t n = last_extent("log_softmax", a);
  const std::size_t rows = a.size() / n;
  std::vector<double> out(a.size());
  auto probs = std::make_shared<std::vector<double>>(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.values().data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = x[j] - lse;
      (*probs)[r * n + j] = std::exp(out[r * n + j]);
    }
  }
  return finish("log_softmax", a.shape(), std::move(out), {a},
                [probs, rows, n](std::span<const double> g, InputGrads& grads) {
                  auto& ga = grads[0];
                  for (std::size_t r = 0; r < rows; ++r) {
                    double total = 0.0;
                    for (std::size_t j = 0; j < n; ++j) total += g[r * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                      ga[r * n + j] += g[r * n + j] - (*probs)[r * n + j] * total;
                  }
                });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return finish("sum", {}, {s}, {a}, [](std::span<const double> g, InputGrads& grads) {
    for (auto& v : grads[0]) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) shape_error("mean", a, "empty tensor");
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double n = static_cast<double>(a.size());
  return finish("mean", {}, {s / n}, {a}, [n](std::span<const double> g, InputGrads& grads) {
    for (auto& v : grads[0]) v += g[0] / n;
  });
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  require_2d("sum_axis", a);
  if (axis > 1) shape_error("sum_axis", a, fmt::format("invalid axis {}", axis));
  const std::size_t m = a.rows(), n = a.cols();
  Shape shape = axis == 0 ? Shape{1, n} : Shape{m, 1};
  std::vector<double> out(numel(shape), 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[axis == 0 ? j : i] += a[i * n + j];
  return finish("sum_axis", std::move(shape), std::move(out), {a},
                [m, n, axis](std::span<const double> g, InputGrads& grads) {
                  auto& ga = grads[0];
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[axis == 0 ? j : i];
                });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const auto& src = a.shape();
  bool ok = src.size() <= shape.size();
  for (std::size_t i = 0; ok && i < src.size(); ++i) {
    const auto s = src[src.size() - 1 - i];
    const auto t = shape[shape.size() - 1 - i];
    ok = s == t || s == 1;
  }
  if (!ok) {
    throw ShapeError(fmt::format("broadcast_to: cannot broadcast {} to {}",
                                 to_string(src), to_string(shape)));
  }
  auto index = std::make_shared<std::vector<std::size_t>>(broadcast_index(src, shape));
  std::vector<double> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[(*index)[i]];
  return finish("broadcast_to", shape, std::move(out), {a},
                [index](std::span<const double> g, InputGrads& grads) {
                  auto& ga = grads[0];
                  for (std::size_t i = 0; i < g.size(); ++i) ga[(*index)[i]] += g[i];
                });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError(fmt::format("reshape: cannot reshape {} to {}", to_string(a.shape()),
                                 to_string(shape)));
  }
  return finish("reshape", shape, a.storage(), {a},
                [](std::span<const double> g, InputGrads& grads) {
                  auto& ga = grads[0];
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Tensor& first = parts.front();
  const std::size_t rank = first.rank();
  if (rank == 0 || rank > 2 || axis >= rank) {
    shape_error("concat", first, fmt::format("invalid axis {}", axis));
  }
  for (const auto& p : parts) {
    if (p.rank() != rank) shape_error("concat", first, p);
    if (rank == 2 && p.shape()[1 - axis] != first.shape()[1 - axis]) shape_error("concat", first, p);
  }
  // Every part is viewed as (outer x width_p); concatenation interleaves the
  // parts row by row, which covers 1-d, axis-0 and axis-1 uniformly.
  const std::size_t outer = (rank == 2 && axis == 1) ? first.rows() : 1;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    widths.push_back(p.size() / outer);
    total += widths.back();
  }
  std::vector<double> out;
  out.reserve(outer * total);
  for (std::size_t r = 0; r < outer; ++r)
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto v = parts[k].values().subspan(r * widths[k], widths[k]);
      out.insert(out.end(), v.begin(), v.end());
    }
  Shape shape = first.shape();
  shape[axis] = 0;
  for (const auto& p : parts) shape[axis] += p.shape()[axis];
  return finish("concat", std::move(shape), std::move(out), parts,
                [outer, widths, total](std::span<const double> g, InputGrads& grads) {
                  std::size_t offset = 0;
                  for (std::size_t k = 0; k < widths.size(); ++k) {
                    if (grads.wants(k)) {
                      auto& gk = grads[k];
                      for (std::size_t r = 0; r < outer; ++r)
                        for (std::size_t j = 0; j < widths[k]; ++j)
                          gk[r * widths[k] + j] += g[r * total + offset + j];
                    }
                    offset += widths[k];
                  }
                });
}

Tensor index_select(const Tensor& a, const std::vector<std::size_t>& indices) {
  if (a.rank() != 1 && a.rank() != 2) shape_error("index_select", a, "expected a 1-d or 2-d tensor");
  const std::size_t extent = a.shape()[0];
  const std::size_t width = a.rank() == 2 ? a.cols() : 1;
  for (auto i : indices) {
    if (i >= extent) shape_error("index_select", a, fmt::format("index {} out of range", i));
  }
  std::vector<double> out;
  out.reserve(indices.size() * width);
  for (auto i : indices) {
    auto v = a.values().subspan(i * width, width);
    out.insert(out.end(), v.begin(), v.end());
  }
  Shape shape = a.shape();
  shape[0] = indices.size();
  return finish("index_select", std::move(shape), std::move(out), {a},
                [indices, width](std::span<const double> g, InputGrads& grads) {
                  auto& ga = grads[0];
                  for (std::size_t r = 0; r < indices.size(); ++r)
                    for (std::size_t j = 0; j < width; ++j) ga[indices[r] * width + j] += g[r * width + j];
                });
}

Tensor detach(const Tensor& a) { return Tensor::constant(a.shape(), a.storage()); }

}  // namespace sib::ad
