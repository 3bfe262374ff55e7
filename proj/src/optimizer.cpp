#include "mtlk/optimizer.hpp"

#include <algorithm>

#include "mtlk/error.hpp"

namespace mtlk {

void validate(const SgdConfig& c) {
  if (!(c.lr > 0)) fail(ErrorKind::BadConfig, "lr must be positive");
  if (!(c.momentum >= 0 && c.momentum < 1)) fail(ErrorKind::BadConfig, "momentum must be in [0,1)");
  if (!(c.weight_decay >= 0)) fail(ErrorKind::BadConfig, "weight_decay must be nonnegative");
  if (!(c.plateau.factor > 0 && c.plateau.factor <= 1)) fail(ErrorKind::BadConfig, "plateau factor must be in (0,1]");
  if (!(c.plateau.threshold >= 0)) fail(ErrorKind::BadConfig, "plateau threshold must be nonnegative");
  if (!(c.plateau.min_lr >= 0)) fail(ErrorKind::BadConfig, "min_lr must be nonnegative");
}

SgdState make_sgd_state(std::span<const Parameter> params, const SgdConfig& cfg) {
  validate(cfg);
  SgdState s;
  for (const auto& p : params) s.velocity.emplace_back(p.tensor.size(), 0.0);
  s.base_lr = cfg.lr;
  s.momentum = cfg.momentum;
  s.weight_decay = cfg.weight_decay;
  s.plateau = cfg.plateau;
  return s;
}

SgdState make_sgd_state(const DualHeadNet& net, const SgdConfig& cfg) {
  return make_sgd_state(std::span<const Parameter>(net.parameters()), cfg);
}

void step(std::span<Parameter> params, SgdState& state) {
  if (state.velocity.size() != params.size()) {
    fail(ErrorKind::ShapeMismatch, "optimizer state tracks " + std::to_string(state.velocity.size()) +
                                       " parameters, net has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = params[i];
    if (!p.trainable) continue;
    if (p.tensor.grad.size() != p.tensor.size()) fail(ErrorKind::MissingGradient, p.name);
    if (state.velocity[i].size() != p.tensor.size()) {
      fail(ErrorKind::ShapeMismatch, "velocity buffer for " + p.name + " has the wrong size");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (!p.trainable) continue;
    const double lr = state.base_lr * p.lr_multiplier;
    auto& v = state.velocity[i];
    auto& w = p.tensor.values;
    auto& g = p.tensor.grad;
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = state.momentum * v[j] - lr * (g[j] + state.weight_decay * w[j]);
      w[j] += v[j];
      g[j] = 0.0;
    }
  }
}

void step(DualHeadNet& net, SgdState& state) { step(std::span<Parameter>(net.parameters()), state); }

double plateau_update(SgdState& state, double monitored) {
  if (monitored < state.best * (1.0 - state.plateau.threshold) || state.best == std::numeric_limits<double>::infinity()) {
    state.best = monitored;
    state.since_improvement = 0;
    return state.base_lr;
  }
  if (++state.since_improvement >= state.plateau.patience) {
    state.base_lr = std::max(state.base_lr * state.plateau.factor, state.plateau.min_lr);
    state.since_improvement = 0;
  }
  return state.base_lr;
}

TrainState to_train_state(const SgdState& s) {
  TrainState t;
  t.velocity = s.velocity;
  t.base_lr = s.base_lr;
  t.momentum = s.momentum;
  t.weight_decay = s.weight_decay;
  t.plateau_best = s.best;
  t.plateau_since = static_cast<double>(s.since_improvement);
  return t;
}

SgdState from_train_state(const TrainState& saved, const SgdConfig& cfg, const DualHeadNet& net) {
  SgdState s = make_sgd_state(net, cfg);
  if (!saved.velocity.empty()) s.velocity = saved.velocity;
  s.base_lr = saved.base_lr;
  s.momentum = saved.momentum;
  s.weight_decay = saved.weight_decay;
  s.best = saved.plateau_best;
  s.since_improvement = static_cast<std::size_t>(saved.plateau_since);
  return s;
}

}  // namespace mtlk
