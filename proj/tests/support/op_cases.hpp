#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mtlk/rng.hpp"
#include "mtlk/tensor.hpp"
#include "support/gradcheck.hpp"

namespace mtlk::testing {

struct OpCase {
  std::string name;
  std::vector<Tensor> leaves;
  GraphBuilder build;
};

inline Tensor random_tensor(Shape shape, Rng& rng, double away_from_zero = 0.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values) {
    v = rng.uniform(-1.0, 1.0);
    if (std::abs(v) < away_from_zero) v += v < 0 ? -away_from_zero : away_from_zero;
  }
  return t;
}

// Reduces an op output to a scalar through a fixed random projection so
// that output columns carry distinct weights.
inline NodeId weighted_sum(Graph& g, NodeId y, std::uint64_t seed) {
  auto flat = g.flatten(y);
  const std::size_t cols = g.value(flat).dim(1);
  Rng r(seed);
  Tensor w({cols, 1});
  for (auto& e : w.values) e = r.uniform(-1.0, 1.0);
  return g.sum(g.matmul(flat, g.input(w, false)));
}

// One gradient-check case per differentiable op kind.
inline std::vector<OpCase> op_cases() {
  Rng rng(11);
  std::vector<OpCase> cases;
  cases.push_back({"matmul", {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
                   [](Graph& g, const std::vector<NodeId>& in) { return weighted_sum(g, g.matmul(in[0], in[1]), 1); }});
  cases.push_back({"conv2d", {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng)},
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return weighted_sum(g, g.conv2d(in[0], in[1], 1, 1), 2);
                   }});
  cases.push_back({"conv2d_strided", {random_tensor({1, 2, 6, 6}, rng), random_tensor({2, 2, 3, 3}, rng)},
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return weighted_sum(g, g.conv2d(in[0], in[1], 2, 1), 3);
                   }});
  cases.push_back({"maxpool2d", {random_tensor({2, 2, 4, 4}, rng)},
                   [](Graph& g, const std::vector<NodeId>& in) { return weighted_sum(g, g.maxpool2d(in[0], 2), 4); }});
  cases.push_back({"global_avg_pool", {random_tensor({2, 3, 3, 3}, rng)},
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return weighted_sum(g, g.global_avg_pool(in[0]), 5);
                   }});
  cases.push_back({"relu", {random_tensor({3, 4}, rng, 0.05)},
                   [](Graph& g, const std::vector<NodeId>& in) { return weighted_sum(g, g.relu(in[0]), 6); }});
  cases.push_back({"add_scale", {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)},
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return weighted_sum(g, g.add(g.scale(in[0], -1.5), in[1]), 7);
                   }});
  cases.push_back({"bias_add", {random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng)},
                   [](Graph& g, const std::vector<NodeId>& in) { return weighted_sum(g, g.bias_add(in[0], in[1]), 8); }});
  cases.push_back({"flatten_sum_sum_squares", {random_tensor({2, 2, 2}, rng)},
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return g.add(g.sum_squares(g.flatten(in[0])), g.scale(g.sum(in[0]), 0.3));
                   }});
  cases.push_back({"sigmoid_cross_entropy", {random_tensor({3, 4}, rng)},
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return g.sigmoid_cross_entropy(in[0], {1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 1});
                   }});
  cases.push_back({"softmax_cross_entropy", {random_tensor({3, 4}, rng)},
                   [](Graph& g, const std::vector<NodeId>& in) { return g.softmax_cross_entropy(in[0], {1, 4, 2}); }});
  return cases;
}

}  // namespace mtlk::testing
