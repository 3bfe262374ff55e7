#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "mtlk/network.hpp"

namespace mtlk {

struct PlateauConfig {
  std::size_t patience = 5;
  double threshold = 1e-3;  // relative improvement required
  double factor = 0.1;
  double min_lr = 1e-6;
};

struct SgdConfig {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  PlateauConfig plateau;
};

void validate(const SgdConfig& cfg);

struct SgdState {
  std::vector<std::vector<double>> velocity;
  double base_lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  PlateauConfig plateau;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;
};

SgdState make_sgd_state(std::span<const Parameter> params, const SgdConfig& cfg);
SgdState make_sgd_state(const DualHeadNet& net, const SgdConfig& cfg);

// Momentum SGD with weight decay folded into the velocity update:
//   v <- momentum * v - (base_lr * m) * (g + weight_decay * p)
//   p <- p + v
// for every trainable parameter with lr multiplier m. Gradients are zeroed
// afterwards.
void step(std::span<Parameter> params, SgdState& state);
void step(DualHeadNet& net, SgdState& state);

// Called once per epoch with the monitored loss. After `patience` epochs
// without a relative improvement of `threshold`, base_lr is multiplied by
// `factor` (never going below `min_lr`) and the counter restarts.
double plateau_update(SgdState& state, double monitored);

TrainState to_train_state(const SgdState& state);
SgdState from_train_state(const TrainState& saved, const SgdConfig& cfg, const DualHeadNet& net);

}  // namespace mtlk
