#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mtlk {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. `grad` stays empty until something
// needs it, after which it always has the same length as `values`.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> v);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad();
  void zero_grad();
};

// Graph node handle. Only meaningful for the graph that issued it.
struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind {
  Input,
  Parameter,
  MatMul,
  Conv2d,
  MaxPool2d,
  GlobalAvgPool,
  Relu,
  Add,
  Scale,
  BiasAdd,
  Flatten,
  Sum,
  SumSquares,
  SigmoidCrossEntropy,
  SoftmaxCrossEntropy,
};

const char* to_string(OpKind kind);

struct OpParams {
  std::size_t stride = 1;   // conv2d
  std::size_t padding = 0;  // conv2d
  std::size_t window = 2;   // maxpool2d, window == stride
  double factor = 1.0;      // scale
  // Per-element 0/1 targets (sigmoid cross-entropy, B*P) or 1-based class
  // labels (softmax cross-entropy, B).
  std::vector<double> targets;
};

// Append-only tape of tensor operations. Nodes are stored in creation order,
// which is a topological order, and backward walks them in reverse.
//
// Shapes per op kind:
//   matmul          [M,K] x [K,N] -> [M,N]
//   conv2d          [B,C,H,W] x [O,C,kh,kw] -> [B,O,Ho,Wo], zero padding
//   maxpool2d       [B,C,H,W] -> [B,C,H/w,W/w], ties go to the lowest index
//   global_avg_pool [B,C,H,W] -> [B,C]
//   bias_add        [B,C,...] + [C] along axis 1
//   flatten         [B,...] -> [B,prod(...)]
//   sum, sum_squares, *_cross_entropy -> [1]
class Graph {
 public:
  // A leaf with requires_grad=false receives no gradient during backward.
  NodeId input(Tensor value, bool requires_grad = true);
  // Leaf bound to an external tensor; backward adds into `param.grad`.
  // `param` must outlive the graph and must not be reallocated meanwhile.
  NodeId parameter(Tensor& param);

  NodeId forward_op(OpKind kind, std::span<const NodeId> inputs, const OpParams& params = {});

  NodeId matmul(NodeId a, NodeId b);
  NodeId conv2d(NodeId x, NodeId w, std::size_t stride = 1, std::size_t padding = 0);
  NodeId maxpool2d(NodeId x, std::size_t window = 2);
  NodeId global_avg_pool(NodeId x);
  NodeId relu(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId x, double factor);
  NodeId bias_add(NodeId x, NodeId bias);
  NodeId flatten(NodeId x);
  NodeId sum(NodeId x);
  NodeId sum_squares(NodeId x);
  // Batch mean of -sum_j [u_j log sigmoid(s_j) + (1-u_j) log(1-sigmoid(s_j))].
  NodeId sigmoid_cross_entropy(NodeId logits, std::vector<double> targets);
  // Batch mean of -log softmax(t)_v, labels are 1-based.
  NodeId softmax_cross_entropy(NodeId logits, std::vector<double> labels);

  void backward(NodeId root);

  const Tensor& value(NodeId id) const;
  const std::vector<double>& grad(NodeId id) const;
  OpKind kind(NodeId id) const;
  std::span<const NodeId> inputs(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    OpParams params;
    Tensor out;
    Tensor* bound = nullptr;
    std::vector<std::uint32_t> argmax;  // maxpool routing
    bool requires_grad = true;
    std::vector<double> columns;  // conv2d im2col buffers, kept for backward
  };

  const Node& node(NodeId id) const;
  Tensor compute(OpKind kind, std::span<const NodeId> inputs, const OpParams& params,
                 std::vector<std::uint32_t>& argmax, std::vector<double>& columns, bool keep) const;
  void propagate(const Node& n);

  std::vector<Node> nodes_;
};

// Numerically stable helpers shared by the objective and the graph.
double softplus(double x);
double sigmoid(double x);

}  // namespace mtlk
