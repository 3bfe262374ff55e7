#include <cmath>
#include <functional>

#include "doctest.h"
#include "mtlk/error.hpp"
#include "mtlk/rng.hpp"
#include "mtlk/tensor.hpp"
#include "support/op_cases.hpp"

using namespace mtlk;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an mtlk::Error");
  return ErrorKind::IoError;
}

}  // namespace

TEST_CASE("relu clamps negatives") {
  Graph g;
  auto x = g.input(Tensor({3}, {-1.0, 0.0, 2.0}));
  CHECK(g.value(g.relu(x)).values == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("matmul with a 1x1 identity returns its operand") {
  Graph g;
  auto i = g.input(Tensor({1, 1}, {1.0}));
  auto x = g.input(Tensor({1, 3}, {0.5, -2.0, 7.25}));
  CHECK(g.value(g.matmul(i, x)).values == std::vector<double>{0.5, -2.0, 7.25});
}

TEST_CASE("conv2d of an all-ones 3x3 image with an all-ones 2x2 kernel") {
  Graph g;
  auto x = g.input(Tensor({1, 1, 3, 3}, 1.0));
  auto w = g.input(Tensor({1, 1, 2, 2}, 1.0));
  const Tensor& y = g.value(g.conv2d(x, w));
  CHECK(y.shape == Shape{1, 1, 2, 2});
  CHECK(y.values == std::vector<double>{4.0, 4.0, 4.0, 4.0});
}

TEST_CASE("conv2d zero padding and stride") {
  Graph g;
  auto x = g.input(Tensor({1, 1, 3, 3}, 1.0));
  auto w = g.input(Tensor({1, 1, 3, 3}, 1.0));
  const Tensor& same = g.value(g.conv2d(x, w, 1, 1));
  CHECK(same.values == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});
  const Tensor& strided = g.value(g.conv2d(x, w, 2, 1));
  CHECK(strided.values == std::vector<double>{4, 4, 4, 4});
}

TEST_CASE("backward of sum gives all-ones gradients") {
  Graph g;
  auto x = g.input(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  g.backward(g.sum(x));
  CHECK(g.grad(x) == std::vector<double>(6, 1.0));
}

TEST_CASE("relu subgradient is zero at and below zero") {
  Graph g;
  auto x = g.input(Tensor({2}, {-1.0, 2.0}));
  g.backward(g.sum(g.relu(x)));
  CHECK(g.grad(x) == std::vector<double>{0.0, 1.0});

  Graph h;
  auto z = h.input(Tensor({1}, {0.0}));
  h.backward(h.sum(h.relu(z)));
  CHECK(h.grad(z)[0] == 0.0);
}

TEST_CASE("maxpool routes ties to the lowest index") {
  Graph g;
  auto x = g.input(Tensor({1, 1, 2, 2}, 3.0));
  auto y = g.maxpool2d(x, 2);
  CHECK(g.value(y).values == std::vector<double>{3.0});
  g.backward(g.sum(y));
  CHECK(g.grad(x) == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("global average pooling and bias_add") {
  Graph g;
  auto x = g.input(Tensor({1, 2, 1, 2}, {1, 3, 10, 20}));
  CHECK(g.value(g.global_avg_pool(x)).values == std::vector<double>{2.0, 15.0});
  auto b = g.input(Tensor({2}, {100, 200}));
  CHECK(g.value(g.bias_add(x, b)).values == std::vector<double>{101, 103, 210, 220});
}

TEST_CASE("gradients accumulate into bound parameters") {
  Tensor p({2}, {1.0, -1.0});
  Graph g;
  auto a = g.parameter(p);
  auto b = g.parameter(p);
  g.backward(g.sum(g.add(a, b)));
  CHECK(p.grad == std::vector<double>{2.0, 2.0});
}

TEST_CASE("a leaf without requires_grad receives no gradient work") {
  Graph g;
  auto x = g.input(Tensor({1, 1, 3, 3}, 1.0), false);
  auto w = g.input(Tensor({1, 1, 2, 2}, 0.5));
  g.backward(g.sum(g.conv2d(x, w)));
  CHECK(g.grad(w) == std::vector<double>(4, 4.0));
  CHECK(g.grad(x) == std::vector<double>(9, 0.0));
}

TEST_CASE("error paths") {
  CHECK(kind_of([] { Tensor({2, 2}, std::vector<double>{1.0}); }) == ErrorKind::ShapeMismatch);
  CHECK(kind_of([] {
          Graph g;
          auto x = g.input(Tensor({2}, 1.0));
          g.backward(x);
        }) == ErrorKind::NonScalarRoot);
  CHECK(kind_of([] {
          Graph g;
          g.matmul(g.input(Tensor({2, 3})), g.input(Tensor({2, 3})));
        }) == ErrorKind::ShapeMismatch);
  CHECK(kind_of([] {
          Graph g;
          g.add(g.input(Tensor({2})), g.input(Tensor({3})));
        }) == ErrorKind::ShapeMismatch);
  CHECK(kind_of([] {
          Graph g;
          g.conv2d(g.input(Tensor({1, 2, 3, 3})), g.input(Tensor({1, 1, 2, 2})));
        }) == ErrorKind::ShapeMismatch);
  CHECK(kind_of([] {
          Graph g;
          g.softmax_cross_entropy(g.input(Tensor({1, 3})), {4.0});
        }) == ErrorKind::BadLabel);
  CHECK(kind_of([] {
          Graph g;
          g.softmax_cross_entropy(g.input(Tensor({1, 3})), {0.0});
        }) == ErrorKind::BadLabel);
  CHECK(kind_of([] {
          Graph g;
          g.forward_op(OpKind::Input, {});
        }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("finite-difference gradients for every op kind") {
  for (const auto& c : testing::op_cases()) {
    CAPTURE(c.name);
    CHECK(testing::check_graph_gradients(c.leaves, c.build) < 1e-4);
  }
}

TEST_CASE("cross-entropy ops are finite for extreme logits") {
  Graph g;
  auto s = g.input(Tensor({1, 2}, {1e4, -1e4}));
  auto les = g.sigmoid_cross_entropy(s, {0.0, 1.0});
  auto loc = g.softmax_cross_entropy(s, {2.0});
  CHECK(std::isfinite(g.value(les)[0]));
  CHECK(std::isfinite(g.value(loc)[0]));
  g.backward(g.add(les, loc));
  for (double d : g.grad(s)) CHECK(std::isfinite(d));
}
