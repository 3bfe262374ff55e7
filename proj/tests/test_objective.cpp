#include <cmath>
#include <functional>
#include <numbers>

#include "doctest.h"
#include "mtlk/error.hpp"
#include "mtlk/objective.hpp"

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

double lesion_value(std::vector<double> logits, std::size_t p, std::vector<std::uint8_t> u) {
  Graph g;
  const std::size_t b = logits.size() / p;
  auto s = g.input(Tensor({b, p}, std::move(logits)));
  return g.value(lesion_loss(g, s, BinaryMatrix{b, p, std::move(u)}))[0];
}

double location_value(std::vector<double> logits, std::size_t q, std::vector<int> v) {
  Graph g;
  const std::size_t b = logits.size() / q;
  auto t = g.input(Tensor({b, q}, std::move(logits)));
  return g.value(location_loss(g, t, v))[0];
}

}  // namespace

TEST_CASE("sigmoid activations") {
  const auto a = sigmoid_activations(Tensor({1, 4}, {0.0, std::log(3.0), -2.0, 2.0}));
  CHECK(a[0] == 0.5);
  CHECK(std::abs(a[1] - 0.75) < 1e-15);
  CHECK(std::abs(a[2] + a[3] - 1.0) < 1e-15);
  CHECK(std::abs(a[3] - 1.0 / (1.0 + std::exp(-2.0))) < 1e-15);
}

TEST_CASE("lesion loss closed forms") {
  CHECK(std::abs(lesion_value({0.0, 0.0}, 2, {1, 0}) - 2.0 * std::numbers::ln2) < 1e-9);
  const double saturated = lesion_value({50.0}, 1, {1});
  CHECK(std::isfinite(saturated));
  CHECK(saturated < 1e-9);

  const double s[3] = {1.0, -1.0, 0.5};
  const int u[3] = {1, 1, 0};
  double expected = 0.0;
  for (int j = 0; j < 3; ++j) {
    const double a = 1.0 / (1.0 + std::exp(-s[j]));
    expected -= u[j] * std::log(a) + (1 - u[j]) * std::log(1.0 - a);
  }
  CHECK(std::abs(lesion_value({1.0, -1.0, 0.5}, 3, {1, 1, 0}) - expected) < 1e-12);
}

TEST_CASE("lesion loss is a batch mean") {
  const double one = lesion_value({0.3, -0.7}, 2, {1, 0});
  const double two = lesion_value({1.5, 2.0}, 2, {0, 1});
  CHECK(std::abs(lesion_value({0.3, -0.7, 1.5, 2.0}, 2, {1, 0, 0, 1}) - (one + two) / 2.0) < 1e-12);
}

TEST_CASE("softmax activations") {
  const auto b = softmax_activations(Tensor({1, 4}, 3.0));
  for (double x : b.values) CHECK(std::abs(x - 0.25) < 1e-15);
  const auto c = softmax_activations(Tensor({1, 3}, {1.0, 0.0, 0.0}));
  CHECK(std::abs(c[0] - std::numbers::e / (std::numbers::e + 2.0)) < 1e-12);
  CHECK(std::abs(c[0] - 0.576117) < 1e-6);

  const auto shifted = softmax_activations(Tensor({1, 3}, {101.0, 100.0, 100.0}));
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(shifted[j] - c[j]) < 1e-12);
  const auto huge = softmax_activations(Tensor({1, 3}, {1e4, -1e4, 0.0}));
  for (double x : huge.values) CHECK(std::isfinite(x));
  CHECK(std::abs(huge[0] + huge[1] + huge[2] - 1.0) < 1e-12);
}

TEST_CASE("location loss closed forms and label range") {
  CHECK(std::abs(location_value({0.2, 0.2, 0.2, 0.2}, 4, {3}) - std::log(4.0)) < 1e-9);
  CHECK(std::abs(location_value({1.0, 0.0, 0.0}, 3, {1}) + std::log(std::numbers::e / (std::numbers::e + 2.0))) <
        1e-12);
  CHECK(std::abs(location_value({1.0, 0.0, 0.0}, 3, {1}) - 0.551445) < 1e-6);
  CHECK(kind_of([] { location_value({0.0, 0.0, 0.0}, 3, {0}); }) == ErrorKind::BadLabel);
  CHECK(kind_of([] { location_value({0.0, 0.0, 0.0}, 3, {4}); }) == ErrorKind::BadLabel);
  CHECK(kind_of([] { lesion_value({0.0, 0.0}, 2, {2, 0}); }) == ErrorKind::BadLabel);
}

TEST_CASE("losses stay finite for extreme logits") {
  CHECK(std::isfinite(lesion_value({1e4, -1e4, 1e4, -1e4}, 4, {0, 1, 1, 0})));
  CHECK(std::isfinite(location_value({1e4, -1e4, 0.0}, 3, {2})));
}

TEST_CASE("joint loss composition") {
  NetConfig cfg;
  auto net = build(cfg, 2, 4, 5);
  net.zero_heads();
  const Tensor image({1, 3, 28, 28}, 0.25);
  const BinaryMatrix u{1, 2, {1, 0}};
  const std::vector<int> v{3};

  SUBCASE("zero heads give the two closed forms") {
    ObjectiveConfig obj;
    obj.gamma = 0.0;
    Graph g;
    const auto j = joint_loss(g, net, g.input(image, false), u, v, obj);
    CHECK(std::abs(j.breakdown.total - (2.0 * std::numbers::ln2 + std::log(4.0))) < 1e-12);
    CHECK(g.value(j.root)[0] == j.breakdown.total);
  }
  SUBCASE("gamma zero: total is the plain sum") {
    auto trained = build(cfg, 2, 4, 6);
    ObjectiveConfig obj;
    obj.gamma = 0.0;
    Graph g;
    const auto j = joint_loss(g, trained, g.input(image, false), u, v, obj);
    CHECK(j.breakdown.total == j.breakdown.lesion_loss + j.breakdown.location_loss);
    CHECK(j.breakdown.reg == 0.0);
  }
  SUBCASE("regularizer is reported and optionally in the graph") {
    auto trained = build(cfg, 2, 4, 6);
    ObjectiveConfig obj;
    obj.gamma = 1e-3;
    Graph g1;
    const auto decoupled = joint_loss(g1, trained, g1.input(image, false), u, v, obj);
    CHECK(std::abs(decoupled.breakdown.reg - 1e-3 * squared_norm(trained)) < 1e-15);
    CHECK(g1.value(decoupled.root)[0] == doctest::Approx(decoupled.breakdown.lesion_loss +
                                                          decoupled.breakdown.location_loss));
    obj.decoupled_reg = false;
    Graph g2;
    const auto coupled = joint_loss(g2, trained, g2.input(image, false), u, v, obj);
    CHECK(std::abs(g2.value(coupled.root)[0] - coupled.breakdown.total) < 1e-12);
  }
  SUBCASE("modes drop the inactive task") {
    ObjectiveConfig obj;
    obj.gamma = 0.0;
    obj.mode = TaskMode::LesionOnly;
    Graph g1;
    const auto les = joint_loss(g1, net, g1.input(image, false), u, v, obj);
    CHECK(les.breakdown.location_loss == 0.0);
    CHECK(std::abs(les.breakdown.total - 2.0 * std::numbers::ln2) < 1e-12);
    obj.mode = TaskMode::LocationOnly;
    Graph g2;
    const auto loc = joint_loss(g2, net, g2.input(image, false), u, v, obj);
    CHECK(loc.breakdown.lesion_loss == 0.0);
    CHECK(std::abs(loc.breakdown.total - std::log(4.0)) < 1e-12);
  }
}

TEST_CASE("task mode names") {
  CHECK(parse_task_mode("mtl") == TaskMode::Mtl);
  CHECK(parse_task_mode("lesion_only") == TaskMode::LesionOnly);
  CHECK(parse_task_mode("location_only") == TaskMode::LocationOnly);
  CHECK(std::string(to_string(TaskMode::LesionOnly)) == "lesion_only");
  CHECK(kind_of([] { parse_task_mode("both"); }) == ErrorKind::BadConfig);
}
