#include "mtlk/objective.hpp"

#include <algorithm>
#include <cmath>

#include "mtlk/error.hpp"

namespace mtlk {

const char* to_string(TaskMode mode) {
  switch (mode) {
    case TaskMode::Mtl: return "mtl";
    case TaskMode::LesionOnly: return "lesion_only";
    case TaskMode::LocationOnly: return "location_only";
  }
  return "?";
}

TaskMode parse_task_mode(const std::string& text) {
  if (text == "mtl") return TaskMode::Mtl;
  if (text == "lesion_only") return TaskMode::LesionOnly;
  if (text == "location_only") return TaskMode::LocationOnly;
  fail(ErrorKind::BadConfig, "unknown mode '" + text + "' (expected mtl|lesion_only|location_only)");
}

Tensor sigmoid_activations(const Tensor& lesion_logits) {
  Tensor out(lesion_logits.shape, lesion_logits.values);
  for (auto& v : out.values) v = sigmoid(v);
  return out;
}

Tensor softmax_activations(const Tensor& location_logits) {
  if (location_logits.rank() != 2) {
    fail(ErrorKind::ShapeMismatch, "softmax: expected [B,Q], got " + shape_string(location_logits.shape));
  }
  Tensor out(location_logits.shape, location_logits.values);
  const std::size_t q = out.dim(1);
  for (std::size_t b = 0; b < out.dim(0); ++b) {
    double* row = out.values.data() + b * q;
    const double mx = *std::max_element(row, row + q);
    double z = 0.0;
    for (std::size_t j = 0; j < q; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < q; ++j) row[j] /= z;
  }
  return out;
}

NodeId lesion_loss(Graph& graph, NodeId lesion_logits, const BinaryMatrix& u) {
  const Tensor& s = graph.value(lesion_logits);
  if (s.rank() != 2 || s.dim(0) != u.rows || s.dim(1) != u.cols) {
    fail(ErrorKind::ShapeMismatch, "lesion_loss: logits " + shape_string(s.shape) + " vs labels [" +
                                       std::to_string(u.rows) + "x" + std::to_string(u.cols) + "]");
  }
  std::vector<double> targets(u.values.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (u.values[i] > 1) fail(ErrorKind::BadLabel, "lesion indicator " + std::to_string(u.values[i]));
    targets[i] = u.values[i];
  }
  return graph.sigmoid_cross_entropy(lesion_logits, std::move(targets));
}

NodeId location_loss(Graph& graph, NodeId location_logits, std::span<const int> v) {
  const Tensor& t = graph.value(location_logits);
  if (t.rank() != 2 || t.dim(0) != v.size()) {
    fail(ErrorKind::ShapeMismatch, "location_loss: logits " + shape_string(t.shape) + " vs " +
                                       std::to_string(v.size()) + " labels");
  }
  const auto q = static_cast<int>(t.dim(1));
  std::vector<double> labels;
  labels.reserve(v.size());
  for (int label : v) {
    if (label < 1 || label > q) {
      fail(ErrorKind::BadLabel, "location " + std::to_string(label) + " outside 1.." + std::to_string(q));
    }
    labels.push_back(label);
  }
  return graph.softmax_cross_entropy(location_logits, std::move(labels));
}

double squared_norm(const DualHeadNet& net) {
  double s = 0.0;
  for (const auto& p : net.parameters()) {
    for (double v : p.tensor.values) s += v * v;
  }
  return s;
}

JointLoss joint_loss(Graph& graph, DualHeadNet& net, NodeId batch, const BinaryMatrix& u,
                     std::span<const int> v, const ObjectiveConfig& cfg) {
  if (!(cfg.gamma >= 0.0)) fail(ErrorKind::BadConfig, "gamma must be nonnegative");
  if (!(cfg.aux_weight >= 0.0)) fail(ErrorKind::BadConfig, "aux_weight must be nonnegative");

  JointLoss out;
  out.outputs = forward(graph, net, batch);
  std::vector<NodeId> terms;
  if (cfg.mode != TaskMode::LocationOnly) {
    NodeId les = lesion_loss(graph, out.outputs.lesion_logits, u);
    out.breakdown.lesion_loss = graph.value(les)[0];
    terms.push_back(les);
  }
  if (cfg.mode != TaskMode::LesionOnly) {
    NodeId loc = location_loss(graph, out.outputs.location_logits, v);
    out.breakdown.location_loss = graph.value(loc)[0];
    terms.push_back(cfg.aux_weight == 1.0 ? loc : graph.scale(loc, cfg.aux_weight));
  }

  out.breakdown.reg = cfg.gamma * squared_norm(net);
  if (!cfg.decoupled_reg && cfg.gamma > 0.0) {
    const auto& leaves = out.outputs.parameters;
    NodeId acc = graph.sum_squares(leaves.front());
    for (std::size_t i = 1; i < leaves.size(); ++i) acc = graph.add(acc, graph.sum_squares(leaves[i]));
    terms.push_back(graph.scale(acc, cfg.gamma));
  }

  NodeId root = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) root = graph.add(root, terms[i]);
  out.root = root;
  out.breakdown.total = out.breakdown.lesion_loss + cfg.aux_weight * out.breakdown.location_loss +
                        out.breakdown.reg;
  return out;
}

}  // namespace mtlk
