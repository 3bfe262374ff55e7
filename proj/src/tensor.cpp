#include "mtlk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <cblas.h>

#include "mtlk/error.hpp"

namespace mtlk {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), values(shape_size(shape), fill) {
  for (auto d : shape) {
    if (d == 0) fail(ErrorKind::ShapeMismatch, "zero-sized dimension in " + shape_string(shape));
  }
}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  if (shape_size(shape) != values.size()) {
    fail(ErrorKind::ShapeMismatch, "shape " + shape_string(shape) + " does not hold " +
                                       std::to_string(values.size()) + " values");
  }
}

void Tensor::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::MaxPool2d: return "maxpool2d";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Relu: return "relu";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
    case OpKind::BiasAdd: return "bias_add";
    case OpKind::Flatten: return "flatten";
    case OpKind::Sum: return "sum";
    case OpKind::SumSquares: return "sum_squares";
    case OpKind::SigmoidCrossEntropy: return "sigmoid_cross_entropy";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "?";
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

[[noreturn]] void shape_error(OpKind kind, const std::string& expected, const Shape& got) {
  fail(ErrorKind::ShapeMismatch, std::string(to_string(kind)) + ": expected " + expected +
                                     ", got " + shape_string(got));
}

void expect_arity(OpKind kind, std::span<const NodeId> inputs, std::size_t n) {
  if (inputs.size() != n) {
    fail(ErrorKind::ShapeMismatch, std::string(to_string(kind)) + ": expected " +
                                       std::to_string(n) + " inputs, got " +
                                       std::to_string(inputs.size()));
  }
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, const OpParams& p) {
  if (x.size() != 4) shape_error(OpKind::Conv2d, "rank-4 input [B,C,H,W]", x);
  if (w.size() != 4 || w[1] != x[1]) {
    shape_error(OpKind::Conv2d, "weights [O," + std::to_string(x[1]) + ",kh,kw]", w);
  }
  if (p.stride == 0) fail(ErrorKind::ShapeMismatch, "conv2d: stride must be positive");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], p.stride, p.padding, 0, 0};
  if (g.height + 2 * g.padding < g.kh || g.width + 2 * g.padding < g.kw) {
    shape_error(OpKind::Conv2d, "kernel no larger than padded input", x);
  }
  g.out_h = (g.height + 2 * g.padding - g.kh) / g.stride + 1;
  g.out_w = (g.width + 2 * g.padding - g.kw) / g.stride + 1;
  return g;
}

// col is [C*kh*kw, Ho*Wo] for one image.
void im2col(const ConvGeometry& g, const double* image, double* col) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto width = static_cast<std::ptrdiff_t>(g.width);
  double* dst = col;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        // valid output columns satisfy 0 <= ox*stride + kj - pad < width
        const auto shift = static_cast<std::ptrdiff_t>(kj) - pad;
        const auto stride = static_cast<std::ptrdiff_t>(g.stride);
        const auto ow = static_cast<std::ptrdiff_t>(g.out_w);
        const std::ptrdiff_t lo = std::min(ow, shift >= 0 ? 0 : (-shift + stride - 1) / stride);
        const std::ptrdiff_t hi = std::max(lo, std::min(ow, width - shift <= 0 ? 0 : (width - shift - 1) / stride + 1));
        for (std::size_t oy = 0; oy < g.out_h; ++oy, dst += g.out_w) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (std::ptrdiff_t ox = 0; ox < lo; ++ox) dst[ox] = 0.0;
          for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride + shift];
          for (std::ptrdiff_t ox = hi; ox < ow; ++ox) dst[ox] = 0.0;
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const std::vector<double>& col, double* image) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto width = static_cast<std::ptrdiff_t>(g.width);
  const auto stride = static_cast<std::ptrdiff_t>(g.stride);
  const auto ow = static_cast<std::ptrdiff_t>(g.out_w);
  const double* src = col.data();
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const auto shift = static_cast<std::ptrdiff_t>(kj) - pad;
        const std::ptrdiff_t lo = std::min(ow, shift >= 0 ? 0 : (-shift + stride - 1) / stride);
        const std::ptrdiff_t hi = std::max(lo, std::min(ow, width - shift <= 0 ? 0 : (width - shift - 1) / stride + 1));
        for (std::size_t oy = 0; oy < g.out_h; ++oy, src += g.out_w) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.width;
          for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox * stride + shift] += src[ox];
        }
      }
    }
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// Row-major C[m,n] = beta*C + op(A) op(B) with op(A) [m,k], op(B) [k,n].
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double beta, double* c) {
  static const bool single_threaded = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)single_threaded;
  if (m == 0 || n == 0) return;
  const auto lda = static_cast<int>(trans_a ? m : k);
  const auto ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a, lda, b, ldb, beta, c,
              static_cast<int>(n));
}

}  // namespace

NodeId Graph::input(Tensor value, bool requires_grad) {
  Node n{OpKind::Input, {}, {}, std::move(value), nullptr, {}, requires_grad, {}};
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

NodeId Graph::parameter(Tensor& param) {
  Node n{OpKind::Parameter, {}, {}, Tensor(param.shape, param.values), &param, {}, true, {}};
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

const Graph::Node& Graph::node(NodeId id) const {
  if (id.index >= nodes_.size()) {
    fail(ErrorKind::ShapeMismatch, "node id " + std::to_string(id.index) + " is not in this graph");
  }
  return nodes_[id.index];
}

const Tensor& Graph::value(NodeId id) const { return node(id).out; }
const std::vector<double>& Graph::grad(NodeId id) const { return node(id).out.grad; }
OpKind Graph::kind(NodeId id) const { return node(id).kind; }
std::span<const NodeId> Graph::inputs(NodeId id) const { return node(id).inputs; }

NodeId Graph::forward_op(OpKind kind, std::span<const NodeId> inputs, const OpParams& params) {
  if (kind == OpKind::Input || kind == OpKind::Parameter) {
    fail(ErrorKind::ShapeMismatch, "leaf nodes are created with input() or parameter()");
  }
  for (auto id : inputs) node(id);
  bool requires_grad = false;
  for (auto id : inputs) requires_grad = requires_grad || nodes_[id.index].requires_grad;
  std::vector<std::uint32_t> argmax;
  std::vector<double> columns;
  Tensor out = compute(kind, inputs, params, argmax, columns, requires_grad);
  nodes_.push_back(Node{kind, {inputs.begin(), inputs.end()}, params, std::move(out), nullptr,
                        std::move(argmax), requires_grad, std::move(columns)});
  return NodeId{nodes_.size() - 1};
}

Tensor Graph::compute(OpKind kind, std::span<const NodeId> in, const OpParams& p,
                      std::vector<std::uint32_t>& argmax, std::vector<double>& columns, bool keep) const {
  switch (kind) {
    case OpKind::MatMul: {
      expect_arity(kind, in, 2);
      const Tensor& a = value(in[0]);
      const Tensor& b = value(in[1]);
      if (a.rank() != 2) shape_error(kind, "rank-2 left operand", a.shape);
      if (b.rank() != 2 || b.dim(0) != a.dim(1)) {
        shape_error(kind, "[" + std::to_string(a.dim(1)) + ",N] right operand", b.shape);
      }
      const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
      Tensor out({m, n});
      gemm(false, false, m, n, k, a.values.data(), b.values.data(), 0.0, out.values.data());
      return out;
    }
    case OpKind::Conv2d: {
      expect_arity(kind, in, 2);
      const Tensor& x = value(in[0]);
      const Tensor& w = value(in[1]);
      const auto g = conv_geometry(x.shape, w.shape, p);
      Tensor out({g.batch, g.out_channels, g.out_h, g.out_w});
      const std::size_t np = g.positions(), patch = g.patch();
      columns.resize(patch * np * (keep ? g.batch : 1));
      for (std::size_t b = 0; b < g.batch; ++b) {
        const double* col = columns.data() + (keep ? b * patch * np : 0);
        im2col(g, x.values.data() + b * g.channels * g.height * g.width, columns.data() + (keep ? b * patch * np : 0));
        double* dst = out.values.data() + b * g.out_channels * np;
        gemm(false, false, g.out_channels, np, patch, w.values.data(), col, 0.0, dst);
      }
      if (!keep) columns.clear();
      return out;
    }
    case OpKind::MaxPool2d: {
      expect_arity(kind, in, 1);
      const Tensor& x = value(in[0]);
      const std::size_t win = p.window;
      if (x.rank() != 4) shape_error(kind, "rank-4 input [B,C,H,W]", x.shape);
      if (win == 0 || x.dim(2) < win || x.dim(3) < win) {
        shape_error(kind, "spatial dims >= window " + std::to_string(win), x.shape);
      }
      const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      const std::size_t oh = h / win, ow = w / win;
      Tensor out({x.dim(0), x.dim(1), oh, ow});
      argmax.resize(out.size());
      for (std::size_t pl = 0; pl < planes; ++pl) {
        const std::size_t base = pl * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            std::size_t best = base + oy * win * w + ox * win;
            for (std::size_t dy = 0; dy < win; ++dy) {
              for (std::size_t dx = 0; dx < win; ++dx) {
                const std::size_t idx = base + (oy * win + dy) * w + ox * win + dx;
                if (x[idx] > x[best]) best = idx;
              }
            }
            const std::size_t o = (pl * oh + oy) * ow + ox;
            out[o] = x[best];
            argmax[o] = static_cast<std::uint32_t>(best);
          }
        }
      }
      return out;
    }
    case OpKind::GlobalAvgPool: {
      expect_arity(kind, in, 1);
      const Tensor& x = value(in[0]);
      if (x.rank() != 4) shape_error(kind, "rank-4 input [B,C,H,W]", x.shape);
      const std::size_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
      Tensor out({x.dim(0), x.dim(1)});
      for (std::size_t pl = 0; pl < planes; ++pl) {
        const double* src = x.values.data() + pl * area;
        double s = 0.0;
        for (std::size_t i = 0; i < area; ++i) s += src[i];
        out[pl] = s / static_cast<double>(area);
      }
      return out;
    }
    case OpKind::Relu: {
      expect_arity(kind, in, 1);
      Tensor out = value(in[0]);
      out.grad.clear();
      for (auto& v : out.values) v = v > 0.0 ? v : 0.0;
      return out;
    }
    case OpKind::Add: {
      expect_arity(kind, in, 2);
      const Tensor& a = value(in[0]);
      const Tensor& b = value(in[1]);
      if (a.shape != b.shape) shape_error(kind, shape_string(a.shape), b.shape);
      Tensor out(a.shape, a.values);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
      return out;
    }
    case OpKind::Scale: {
      expect_arity(kind, in, 1);
      const Tensor& a = value(in[0]);
      Tensor out(a.shape, a.values);
      for (auto& v : out.values) v *= p.factor;
      return out;
    }
    case OpKind::BiasAdd: {
      expect_arity(kind, in, 2);
      const Tensor& x = value(in[0]);
      const Tensor& b = value(in[1]);
      if (x.rank() < 2) shape_error(kind, "input of rank >= 2", x.shape);
      if (b.rank() != 1 || b.dim(0) != x.dim(1)) {
        shape_error(kind, "bias [" + std::to_string(x.dim(1)) + "]", b.shape);
      }
      Tensor out(x.shape, x.values);
      const std::size_t channels = x.dim(1);
      const std::size_t inner = x.size() / (x.dim(0) * channels);
      double* dst = out.values.data();
      for (std::size_t r = 0; r < x.dim(0); ++r) {
        for (std::size_t c = 0; c < channels; ++c, dst += inner) {
          const double bias = b[c];
          for (std::size_t i = 0; i < inner; ++i) dst[i] += bias;
        }
      }
      return out;
    }
    case OpKind::Flatten: {
      expect_arity(kind, in, 1);
      const Tensor& x = value(in[0]);
      if (x.rank() < 1) shape_error(kind, "input of rank >= 1", x.shape);
      return Tensor({x.dim(0), x.size() / x.dim(0)}, x.values);
    }
    case OpKind::Sum:
    case OpKind::SumSquares: {
      expect_arity(kind, in, 1);
      const Tensor& x = value(in[0]);
      double s = 0.0;
      if (kind == OpKind::Sum) {
        for (double v : x.values) s += v;
      } else {
        s = dot(x.values.data(), x.values.data(), x.size());
      }
      return Tensor::scalar(s);
    }
    case OpKind::SigmoidCrossEntropy: {
      expect_arity(kind, in, 1);
      const Tensor& s = value(in[0]);
      if (s.rank() != 2) shape_error(kind, "logits [B,P]", s.shape);
      if (p.targets.size() != s.size()) {
        fail(ErrorKind::ShapeMismatch, "sigmoid_cross_entropy: " +
                                           std::to_string(p.targets.size()) + " targets for " +
                                           shape_string(s.shape) + " logits");
      }
      double total = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double u = p.targets[i];
        total += u * softplus(-s[i]) + (1.0 - u) * softplus(s[i]);
      }
      return Tensor::scalar(total / static_cast<double>(s.dim(0)));
    }
    case OpKind::SoftmaxCrossEntropy: {
      expect_arity(kind, in, 1);
      const Tensor& t = value(in[0]);
      if (t.rank() != 2) shape_error(kind, "logits [B,Q]", t.shape);
      const std::size_t batch = t.dim(0), q = t.dim(1);
      if (p.targets.size() != batch) {
        fail(ErrorKind::ShapeMismatch, "softmax_cross_entropy: " +
                                           std::to_string(p.targets.size()) + " labels for batch " +
                                           std::to_string(batch));
      }
      double total = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = t.values.data() + b * q;
        const double mx = *std::max_element(row, row + q);
        double z = 0.0;
        for (std::size_t j = 0; j < q; ++j) z += std::exp(row[j] - mx);
        const auto v = static_cast<std::size_t>(p.targets[b]) - 1;
        total += mx + std::log(z) - row[v];
      }
      return Tensor::scalar(total / static_cast<double>(batch));
    }
    case OpKind::Input:
    case OpKind::Parameter:
      break;
  }
  fail(ErrorKind::ShapeMismatch, "unsupported op kind");
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const NodeId in[] = {a, b};
  return forward_op(OpKind::MatMul, in);
}

NodeId Graph::conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding) {
  const NodeId in[] = {x, w};
  OpParams p;
  p.stride = stride;
  p.padding = padding;
  return forward_op(OpKind::Conv2d, in, p);
}

NodeId Graph::maxpool2d(NodeId x, std::size_t window) {
  const NodeId in[] = {x};
  OpParams p;
  p.window = window;
  return forward_op(OpKind::MaxPool2d, in, p);
}

NodeId Graph::global_avg_pool(NodeId x) {
  const NodeId in[] = {x};
  return forward_op(OpKind::GlobalAvgPool, in);
}

NodeId Graph::relu(NodeId x) {
  const NodeId in[] = {x};
  return forward_op(OpKind::Relu, in);
}

NodeId Graph::add(NodeId a, NodeId b) {
  const NodeId in[] = {a, b};
  return forward_op(OpKind::Add, in);
}

NodeId Graph::scale(NodeId x, double factor) {
  const NodeId in[] = {x};
  OpParams p;
  p.factor = factor;
  return forward_op(OpKind::Scale, in, p);
}

NodeId Graph::bias_add(NodeId x, NodeId bias) {
  const NodeId in[] = {x, bias};
  return forward_op(OpKind::BiasAdd, in);
}

NodeId Graph::flatten(NodeId x) {
  const NodeId in[] = {x};
  return forward_op(OpKind::Flatten, in);
}

NodeId Graph::sum(NodeId x) {
  const NodeId in[] = {x};
  return forward_op(OpKind::Sum, in);
}

NodeId Graph::sum_squares(NodeId x) {
  const NodeId in[] = {x};
  return forward_op(OpKind::SumSquares, in);
}

NodeId Graph::sigmoid_cross_entropy(NodeId logits, std::vector<double> targets) {
  const NodeId in[] = {logits};
  OpParams p;
  p.targets = std::move(targets);
  return forward_op(OpKind::SigmoidCrossEntropy, in, p);
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::vector<double> labels) {
  const std::size_t q = value(logits).rank() == 2 ? value(logits).dim(1) : 0;
  for (double v : labels) {
    if (v < 1.0 || v > static_cast<double>(q) || v != std::floor(v)) {
      fail(ErrorKind::BadLabel, "location label " + std::to_string(v) + " outside 1.." +
                                    std::to_string(q));
    }
  }
  const NodeId in[] = {logits};
  OpParams p;
  p.targets = std::move(labels);
  return forward_op(OpKind::SoftmaxCrossEntropy, in, p);
}

void Graph::backward(NodeId root) {
  const Node& r = node(root);
  if (r.out.size() != 1) {
    fail(ErrorKind::NonScalarRoot, "backward root has shape " + shape_string(r.out.shape));
  }
  for (std::size_t i = 0; i <= root.index; ++i) {
    nodes_[i].out.grad.assign(nodes_[i].out.size(), 0.0);
  }
  if (!r.requires_grad) return;
  nodes_[root.index].out.grad[0] = 1.0;
  for (std::size_t i = root.index + 1; i-- > 0;) {
    propagate(nodes_[i]);
  }
  for (std::size_t i = 0; i <= root.index; ++i) {
    Node& n = nodes_[i];
    if (n.kind != OpKind::Parameter || n.bound == nullptr) continue;
    n.bound->ensure_grad();
    for (std::size_t j = 0; j < n.out.size(); ++j) n.bound->grad[j] += n.out.grad[j];
  }
}

void Graph::propagate(const Node& n) {
  const std::vector<double>& gout = n.out.grad;
  if (!n.requires_grad) return;
  auto grad_of = [this](NodeId id) -> std::vector<double>& { return nodes_[id.index].out.grad; };

  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Parameter:
      return;
    case OpKind::MatMul: {
      const Tensor& a = value(n.inputs[0]);
      const Tensor& b = value(n.inputs[1]);
      const std::size_t m = a.dim(0), k = a.dim(1), cols = b.dim(1);
      if (nodes_[n.inputs[0].index].requires_grad) {
        gemm(false, true, m, k, cols, gout.data(), b.values.data(), 1.0, grad_of(n.inputs[0]).data());
      }
      if (nodes_[n.inputs[1].index].requires_grad) {
        gemm(true, false, k, cols, m, a.values.data(), gout.data(), 1.0, grad_of(n.inputs[1]).data());
      }
      return;
    }
    case OpKind::Conv2d: {
      const Tensor& x = value(n.inputs[0]);
      const Tensor& w = value(n.inputs[1]);
      const auto g = conv_geometry(x.shape, w.shape, n.params);
      const std::size_t np = g.positions(), patch = g.patch();
      auto& gx = grad_of(n.inputs[0]);
      auto& gw = grad_of(n.inputs[1]);
      const bool need_x = nodes_[n.inputs[0].index].requires_grad;
      const bool need_w = nodes_[n.inputs[1].index].requires_grad;
      std::vector<double> dcol(need_x ? patch * np : 0);
      const std::size_t image_size = g.channels * g.height * g.width;
      for (std::size_t b = 0; b < g.batch; ++b) {
        const double* gimg = gout.data() + b * g.out_channels * np;
        if (need_w) {
          gemm(false, true, g.out_channels, patch, np, gimg, n.columns.data() + b * patch * np, 1.0, gw.data());
        }
        if (need_x) {
          gemm(true, false, patch, np, g.out_channels, w.values.data(), gimg, 0.0, dcol.data());
          col2im_add(g, dcol, gx.data() + b * image_size);
        }
      }
      return;
    }
    case OpKind::MaxPool2d: {
      auto& gx = grad_of(n.inputs[0]);
      for (std::size_t i = 0; i < gout.size(); ++i) gx[n.argmax[i]] += gout[i];
      return;
    }
    case OpKind::GlobalAvgPool: {
      const Tensor& x = value(n.inputs[0]);
      const std::size_t area = x.dim(2) * x.dim(3);
      const double inv = 1.0 / static_cast<double>(area);
      auto& gx = grad_of(n.inputs[0]);
      for (std::size_t pl = 0; pl < gout.size(); ++pl) {
        for (std::size_t i = 0; i < area; ++i) gx[pl * area + i] += gout[pl] * inv;
      }
      return;
    }
    case OpKind::Relu: {
      const Tensor& x = value(n.inputs[0]);
      auto& gx = grad_of(n.inputs[0]);
      for (std::size_t i = 0; i < gout.size(); ++i) {
        if (x[i] > 0.0) gx[i] += gout[i];
      }
      return;
    }
    case OpKind::Add: {
      for (auto id : n.inputs) {
        auto& gi = grad_of(id);
        for (std::size_t i = 0; i < gout.size(); ++i) gi[i] += gout[i];
      }
      return;
    }
    case OpKind::Scale: {
      auto& gx = grad_of(n.inputs[0]);
      for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += n.params.factor * gout[i];
      return;
    }
    case OpKind::BiasAdd: {
      const Tensor& x = value(n.inputs[0]);
      auto& gx = grad_of(n.inputs[0]);
      auto& gb = grad_of(n.inputs[1]);
      const std::size_t channels = x.dim(1);
      const std::size_t inner = x.size() / (x.dim(0) * channels);
      const double* src = gout.data();
      for (std::size_t r = 0; r < x.dim(0); ++r) {
        for (std::size_t c = 0; c < channels; ++c, src += inner) {
          double* dst = gx.data() + (src - gout.data());
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) {
            dst[i] += src[i];
            acc += src[i];
          }
          gb[c] += acc;
        }
      }
      return;
    }
    case OpKind::Flatten: {
      auto& gx = grad_of(n.inputs[0]);
      for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += gout[i];
      return;
    }
    case OpKind::Sum: {
      auto& gx = grad_of(n.inputs[0]);
      for (auto& g : gx) g += gout[0];
      return;
    }
    case OpKind::SumSquares: {
      const Tensor& x = value(n.inputs[0]);
      auto& gx = grad_of(n.inputs[0]);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * x[i] * gout[0];
      return;
    }
    case OpKind::SigmoidCrossEntropy: {
      const Tensor& s = value(n.inputs[0]);
      auto& gs = grad_of(n.inputs[0]);
      const double scale = gout[0] / static_cast<double>(s.dim(0));
      for (std::size_t i = 0; i < s.size(); ++i) gs[i] += scale * (sigmoid(s[i]) - n.params.targets[i]);
      return;
    }
    case OpKind::SoftmaxCrossEntropy: {
      const Tensor& t = value(n.inputs[0]);
      auto& gt = grad_of(n.inputs[0]);
      const std::size_t batch = t.dim(0), q = t.dim(1);
      const double scale = gout[0] / static_cast<double>(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = t.values.data() + b * q;
        const double mx = *std::max_element(row, row + q);
        double z = 0.0;
        for (std::size_t j = 0; j < q; ++j) z += std::exp(row[j] - mx);
        const auto v = static_cast<std::size_t>(n.params.targets[b]) - 1;
        for (std::size_t j = 0; j < q; ++j) {
          const double prob = std::exp(row[j] - mx) / z;
          gt[b * q + j] += scale * (prob - (j == v ? 1.0 : 0.0));
        }
      }
      return;
    }
  }
}

}  // namespace mtlk
