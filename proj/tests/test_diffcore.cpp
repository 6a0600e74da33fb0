#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "sib/error.hpp"
#include "sib/gradcheck.hpp"
#include "sib/ops.hpp"
#include "sib/rng.hpp"
#include "sib/selfcheck.hpp"

using namespace sib;
using namespace sib::ad;

TEST(Ops, MatmulIdentity) {
  const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const Tensor id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor c = matmul(a, id);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(c.storage(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Ops, SoftmaxUniform) {
  const Tensor s = softmax(Tensor::vector({0, 0, 0}));
  for (double v : s.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Ops, MeanOfSquares) {
  // 1 + 4 + 9 = 14 over 3 entries.
  EXPECT_DOUBLE_EQ(mean(square(Tensor::vector({1, 2, 3}))).item(), 14.0 / 3.0);
}

TEST(Ops, SoftmaxIsShiftInvariantAndStable) {
  const Tensor a = softmax(Tensor::vector({1000, 1001, 1002}));
  const Tensor b = softmax(Tensor::vector({0, 1, 2}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(Ops, ShapeErrorsNameOpAndShapes) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 2})}, 0), ShapeError);
  EXPECT_THROW(index_select(Tensor::zeros({2, 3}), {5}), ShapeError);
}

TEST(Backward, Square) {
  Tape tape;
  const Tensor x = tape.leaf({}, {3.0});
  const auto g = tape.backward(square(x));
  EXPECT_DOUBLE_EQ(g.of(x).item(), 6.0);
}

TEST(Backward, Product) {
  Tape tape;
  const Tensor x = tape.leaf({}, {2.0});
  const Tensor y = tape.leaf({}, {5.0});
  const auto g = tape.backward(x * y);
  EXPECT_DOUBLE_EQ(g.of(x).item(), 5.0);
  EXPECT_DOUBLE_EQ(g.of(y).item(), 2.0);
}

TEST(Backward, RejectsNonScalarAndForeignTensors) {
  Tape tape, other;
  const Tensor x = tape.leaf({2}, {1.0, 2.0});
  EXPECT_THROW(tape.backward(x), Error);
  const Tensor z = other.leaf({}, {1.0});
  const auto g = tape.backward(sum(x));
  EXPECT_THROW(g.of(z), Error);
  EXPECT_THROW(g.of(Tensor::scalar(1.0)), Error);
}

TEST(Backward, VisitsEachNodeOnce) {
  Tape tape;
  const Tensor x = tape.leaf({}, {1.5});
  Tensor y = x;
  for (int i = 0; i < 5; ++i) y = y * x + y;  // diamond-shaped reuse
  tape.backward(y);
  std::size_t interior = 0;
  for (NodeId id = 0; id < tape.size(); ++id) {
    if (tape.node(id).backward) ++interior;
    for (NodeId in : tape.node(id).inputs) EXPECT_LT(in, id);
  }
  EXPECT_EQ(tape.last_backward_visits(), interior);
}

TEST(Backward, Deterministic) {
  auto run = [] {
    Tape tape;
    const Tensor w = tape.leaf(Tensor::matrix(2, 3, {0.1, -0.4, 0.3, 0.9, -1.2, 0.5}));
    const Tensor x = Tensor::matrix(4, 2, {1, 2, 3, 4, 5, 6, 7, 8});
    const Tensor loss = mean(tanh(matmul(x, w)));
    return tape.backward(loss).values_of(w);
  };
  EXPECT_EQ(run(), run());
}

TEST(Detach, ProductRuleWithOneBranchCut) {
  Tape tape;
  const Tensor x = tape.leaf({}, {2.0});
  const auto g = tape.backward(detach(x) * x);
  EXPECT_DOUBLE_EQ(g.of(x).item(), 2.0);
}

TEST(Detach, KeepsValues) {
  const Tensor t = Tensor::matrix(2, 2, {1.5, -2, 3, 4});
  EXPECT_EQ(detach(t).storage(), t.storage());
  Tape tape;
  EXPECT_FALSE(detach(tape.leaf(t)).requires_grad());
}

// Random small graphs: a leaf reached only through detach gets zero gradient.
TEST(Detach, ZeroGradientPropertyOnRandomGraphs) {
  CounterRng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    Tape tape;
    const Tensor a = tape.leaf({3}, {rng.normal(), rng.normal(), rng.normal()});
    const Tensor b = tape.leaf({3}, {rng.normal(), rng.normal(), rng.normal()});
    Tensor cut = detach(a);
    Tensor live = b;
    for (int depth = 0; depth < 4; ++depth) {
      switch (rng.below(5)) {
        case 0: cut = tanh(cut) * live; break;
        case 1: cut = exp(scale(cut, 0.1)) + live; break;
        case 2: live = live * cut; break;
        case 3: live = softmax(live + cut); break;
        default: cut = square(cut) - live; break;
      }
    }
    const auto g = tape.backward(sum(cut * live));
    for (double v : g.values_of(a)) EXPECT_EQ(v, 0.0);
  }
}

TEST(GradCheck, TwoLayerTanhMlp) {
  CounterRng rng(5);
  auto rnd = [&](std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (double& x : v) x = rng.normal();
    return Tensor::matrix(r, c, v);
  };
  const Tensor x = rnd(6, 3);
  const Tensor y = rnd(6, 2);
  const ScalarFn fn = [&](Tape&, const std::vector<Tensor>& p) {
    const Tensor h = tanh(matmul(x, p[0]) + broadcast_to(p[1], {6, 4}));
    const Tensor out = matmul(h, p[2]) + broadcast_to(p[3], {6, 2});
    return mean(square(out - y));
  };
  const auto r = check_gradients("mlp", fn, {rnd(3, 4), rnd(1, 4), rnd(4, 2), rnd(1, 2)});
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(GradCheck, WholeSuitePasses) {
  for (const auto& r : gradcheck_suite()) EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel_error;
}

TEST(GradCheck, SuiteCoversRequiredOps) {
  std::vector<std::string> names;
  for (const auto& r : gradcheck_suite()) names.push_back(r.name);
  for (const char* op : {"add", "sub", "mul", "matmul", "scale", "relu", "tanh", "exp", "log", "softmax", "sum",
                         "mean", "square", "sqrt", "concat0", "index_select", "sib_unrolled_cosine_gaussian",
                         "sib_unrolled_toy"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), op), names.end()) << op;
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  // exp(x) with a deliberately corrupted backward.
  const ScalarFn fn = [](Tape& tape, const std::vector<Tensor>& l) {
    const Tensor& x = l[0];
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(x[i]);
    const Tensor inputs[] = {x};
    const auto values = v;
    const Tensor y = tape.record("bad_exp", x.shape(), v, inputs, [values](std::span<const double> g, InputGrads& gr) {
      if (!gr.wants(0)) return;
      for (std::size_t i = 0; i < g.size(); ++i) gr[0][i] += 2.0 * g[i] * values[i];
    });
    return sum(y);
  };
  EXPECT_FALSE(check_gradients("bad", fn, {Tensor::vector({0.1, 0.2})}).passed);
}
