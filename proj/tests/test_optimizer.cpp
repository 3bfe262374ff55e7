#include <functional>

#include "doctest.h"
#include "mtlk/error.hpp"
#include "mtlk/optimizer.hpp"

using namespace mtlk;

namespace {

std::vector<Parameter> scalar_param(double w, double lr_mult = 1.0) {
  std::vector<Parameter> ps(1);
  ps[0].name = "w";
  ps[0].tensor = Tensor({1}, {w});
  ps[0].tensor.ensure_grad();
  ps[0].lr_multiplier = lr_mult;
  return ps;
}

SgdState plain_state(std::span<const Parameter> ps, double lr, std::size_t patience = 5) {
  SgdConfig cfg;
  cfg.lr = lr;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.0;
  cfg.plateau.patience = patience;
  return make_sgd_state(ps, cfg);
}

}  // namespace

TEST_CASE("two momentum steps match the hand calculation") {
  auto ps = scalar_param(1.0);
  auto st = plain_state(ps, 0.1);
  ps[0].tensor.grad[0] = 0.5;
  step(ps, st);
  CHECK(st.velocity[0][0] == -0.05);
  CHECK(ps[0].tensor[0] == 0.95);
  CHECK(ps[0].tensor.grad[0] == 0.0);
  ps[0].tensor.grad[0] = 0.5;
  step(ps, st);
  CHECK(st.velocity[0][0] == -0.095);
  CHECK(ps[0].tensor[0] == 0.855);
}

TEST_CASE("zero gradient and zero decay is a fixed point") {
  auto ps = scalar_param(0.3);
  auto st = plain_state(ps, 0.1);
  for (int i = 0; i < 5; ++i) step(ps, st);
  CHECK(ps[0].tensor[0] == 0.3);
}

TEST_CASE("weight decay and lr multipliers enter the velocity") {
  auto ps = scalar_param(2.0, 10.0);
  SgdConfig cfg;
  cfg.lr = 0.01;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.5;
  auto st = make_sgd_state(ps, cfg);
  ps[0].tensor.grad[0] = 1.0;
  step(ps, st);
  CHECK(ps[0].tensor[0] == doctest::Approx(2.0 - 0.1 * (1.0 + 0.5 * 2.0)).epsilon(1e-15));
}

TEST_CASE("frozen parameters are skipped") {
  auto ps = scalar_param(1.0);
  ps[0].trainable = false;
  auto st = plain_state(ps, 0.1);
  ps[0].tensor.grad[0] = 3.0;
  step(ps, st);
  CHECK(ps[0].tensor[0] == 1.0);
}

TEST_CASE("missing gradients are reported") {
  auto ps = scalar_param(1.0);
  ps[0].tensor.grad.clear();
  auto st = plain_state(ps, 0.1);
  bool thrown = false;
  try {
    step(ps, st);
  } catch (const Error& e) {
    thrown = e.kind() == ErrorKind::MissingGradient;
  }
  CHECK(thrown);
}

TEST_CASE("plateau schedule") {
  auto ps = scalar_param(1.0);
  SUBCASE("improving losses keep the rate") {
    auto st = plain_state(ps, 0.001, 2);
    for (double loss : {1.0, 0.9, 0.8}) plateau_update(st, loss);
    CHECK(st.base_lr == 0.001);
  }
  SUBCASE("flat losses cut the rate after patience is exhausted") {
    auto st = plain_state(ps, 0.001, 2);
    CHECK(plateau_update(st, 1.0) == 0.001);
    CHECK(plateau_update(st, 1.0) == 0.001);
    CHECK(plateau_update(st, 1.0) == doctest::Approx(0.0001).epsilon(1e-15));
    CHECK(st.since_improvement == 0);
  }
  SUBCASE("improvements below the relative threshold do not count") {
    auto st = plain_state(ps, 0.001, 1);
    plateau_update(st, 1.0);
    plateau_update(st, 1.0 - 1e-4);
    CHECK(st.base_lr < 0.001);
  }
  SUBCASE("the rate never drops below the floor") {
    auto st = plain_state(ps, 0.001, 1);
    for (int i = 0; i < 50; ++i) plateau_update(st, 1.0);
    CHECK(st.base_lr == st.plateau.min_lr);
  }
}

TEST_CASE("optimizer state survives the checkpoint representation") {
  auto ps = scalar_param(1.0);
  auto st = plain_state(ps, 0.1);
  ps[0].tensor.grad[0] = 0.5;
  step(ps, st);
  plateau_update(st, 2.0);
  plateau_update(st, 2.0);
  const auto saved = to_train_state(st);
  CHECK(saved.velocity == st.velocity);
  CHECK(saved.base_lr == st.base_lr);
  CHECK(saved.plateau_best == 2.0);
  CHECK(saved.plateau_since == 1.0);
}
