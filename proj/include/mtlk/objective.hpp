#pragma once

#include <span>
#include <string>

#include "mtlk/data.hpp"
#include "mtlk/network.hpp"
#include "mtlk/tensor.hpp"

namespace mtlk {

enum class TaskMode { Mtl, LesionOnly, LocationOnly };

const char* to_string(TaskMode mode);
TaskMode parse_task_mode(const std::string& text);

struct LossBreakdown {
  double lesion_loss = 0.0;    // batch mean of the sigmoid cross-entropy
  double location_loss = 0.0;  // batch mean of the softmax loss
  double reg = 0.0;            // gamma * sum of squared parameters
  double total = 0.0;          // lesion_loss + aux_weight * location_loss + reg
};

struct ObjectiveConfig {
  TaskMode mode = TaskMode::Mtl;
  double gamma = 1e-4;
  // When set the penalty is applied by the optimizer as weight decay and the
  // graph root excludes it; `reg` is still reported.
  bool decoupled_reg = true;
  double aux_weight = 1.0;
};

// a_j = 1 / (1 + exp(-s_j)), elementwise.
Tensor sigmoid_activations(const Tensor& lesion_logits);
// Row-wise softmax of a [B,Q] tensor.
Tensor softmax_activations(const Tensor& location_logits);

// Batch mean of -sum_j [u_j log a_j + (1-u_j) log(1-a_j)], via softplus.
NodeId lesion_loss(Graph& graph, NodeId lesion_logits, const BinaryMatrix& u);
// Batch mean of -log b_v computed as logsumexp(t) - t_v; v is 1-based.
NodeId location_loss(Graph& graph, NodeId location_logits, std::span<const int> v);

struct JointLoss {
  NodeId root;  // differentiable objective
  LossBreakdown breakdown;
  NetNodes outputs;
};

JointLoss joint_loss(Graph& graph, DualHeadNet& net, NodeId batch, const BinaryMatrix& u,
                     std::span<const int> v, const ObjectiveConfig& cfg);

double squared_norm(const DualHeadNet& net);

}  // namespace mtlk
