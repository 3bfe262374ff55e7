#include "mtlk/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mtlk/error.hpp"
#include "mtlk/rng.hpp"

namespace mtlk {

const char* to_string(Head head) { return head == Head::Lesion ? "lesion" : "location"; }

namespace {

// Parameter layout: stem weights/bias, 4 per residual block, then the heads.
constexpr std::size_t kStemParams = 2;
constexpr std::size_t kBlockParams = 4;

std::size_t head_index(const DualHeadNet& net, Head head) {
  return kStemParams + kBlockParams * net.config().residual_blocks + (head == Head::Lesion ? 0 : 2);
}

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.values) v = rng.uniform(-a, a);
  return t;
}

}  // namespace

Parameter& DualHeadNet::head_weights(Head head) { return params_[head_index(*this, head)]; }
const Parameter& DualHeadNet::head_weights(Head head) const {
  return params_[head_index(*this, head)];
}
Parameter& DualHeadNet::head_bias(Head head) { return params_[head_index(*this, head) + 1]; }
const Parameter& DualHeadNet::head_bias(Head head) const {
  return params_[head_index(*this, head) + 1];
}

void DualHeadNet::zero_heads() {
  for (Head h : {Head::Lesion, Head::Location}) {
    std::fill(head_weights(h).tensor.values.begin(), head_weights(h).tensor.values.end(), 0.0);
    std::fill(head_bias(h).tensor.values.begin(), head_bias(h).tensor.values.end(), 0.0);
  }
}

void DualHeadNet::zero_grad() {
  for (auto& p : params_) {
    p.tensor.ensure_grad();
    p.tensor.zero_grad();
  }
}

void validate(const NetConfig& c) {
  auto bad = [](const std::string& why) { fail(ErrorKind::BadConfig, why); };
  if (c.in_channels == 0) bad("in_channels must be positive");
  if (c.channels == 0) bad("channels must be positive");
  if (c.kernel == 0 || c.kernel % 2 == 0) bad("kernel must be odd");
  if (c.pool == 0) bad("pool must be positive");
  if (c.input_size < c.pool) bad("input_size smaller than the pooling window");
  if (c.input_size % c.pool != 0) bad("input_size must be a multiple of pool");
  if (c.head_weight_lr_mult < 0 || c.head_bias_lr_mult < 0) bad("negative lr multiplier");
}

DualHeadNet build(const NetConfig& config, std::size_t lesions, std::size_t locations,
                  std::uint64_t seed) {
  validate(config);
  if (lesions < 1) fail(ErrorKind::BadConfig, "need at least one lesion class");
  if (locations < 2) fail(ErrorKind::BadConfig, "need at least two location classes");

  DualHeadNet net;
  net.config_ = config;
  net.lesions_ = lesions;
  net.locations_ = locations;

  Rng rng(seed);
  const std::size_t k = config.kernel, c = config.channels;
  auto conv = [&](const std::string& name, std::size_t in) {
    net.params_.push_back({name + ".w", glorot({c, in, k, k}, in * k * k, c * k * k, rng), 1.0});
    net.params_.push_back({name + ".b", Tensor({c}), 1.0});
  };
  conv("stem", config.in_channels);
  for (std::size_t b = 0; b < config.residual_blocks; ++b) {
    conv("block" + std::to_string(b) + ".a", c);
    conv("block" + std::to_string(b) + ".b", c);
  }
  auto head = [&](const std::string& name, std::size_t out) {
    net.params_.push_back({name + ".w", glorot({c, out}, c, out, rng), config.head_weight_lr_mult});
    net.params_.push_back({name + ".b", Tensor({out}), config.head_bias_lr_mult});
  };
  head("lesion", lesions);
  head("location", locations);
  return net;
}

namespace {

template <typename Bind>
NetNodes forward_impl(Graph& g, const DualHeadNet& net, NodeId batch, Bind bind) {
  const NetConfig& c = net.config();
  const Tensor& x = g.value(batch);
  if (x.rank() != 4 || x.dim(1) != c.in_channels || x.dim(2) != c.input_size ||
      x.dim(3) != c.input_size) {
    fail(ErrorKind::ShapeMismatch,
         "net input: expected [B," + std::to_string(c.in_channels) + "," +
             std::to_string(c.input_size) + "," + std::to_string(c.input_size) + "], got " +
             shape_string(x.shape));
  }
  const std::size_t pad = c.kernel / 2;
  NetNodes out;
  std::size_t p = 0;
  auto take = [&] {
    out.parameters.push_back(bind(p++));
    return out.parameters.back();
  };
  auto conv_bias = [&](NodeId in) {
    NodeId w = take();
    NodeId b = take();
    return g.bias_add(g.conv2d(in, w, 1, pad), b);
  };

  NodeId h = g.maxpool2d(g.relu(conv_bias(batch)), c.pool);
  for (std::size_t blk = 0; blk < c.residual_blocks; ++blk) {
    NodeId inner = g.relu(conv_bias(h));
    h = g.relu(g.add(h, conv_bias(inner)));
  }
  out.conv_maps = h;
  out.features = g.global_avg_pool(h);
  NodeId lw = take();
  NodeId lb = take();
  out.lesion_logits = g.bias_add(g.matmul(out.features, lw), lb);
  NodeId qw = take();
  NodeId qb = take();
  out.location_logits = g.bias_add(g.matmul(out.features, qw), qb);
  return out;
}

}  // namespace

NetNodes forward(Graph& graph, DualHeadNet& net, NodeId batch) {
  auto& params = net.parameters();
  return forward_impl(graph, net, batch,
                      [&](std::size_t i) { return graph.parameter(params[i].tensor); });
}

NetOutputs forward(const DualHeadNet& net, const Tensor& batch) {
  Graph graph;
  NodeId in = graph.input(batch, false);
  const auto& params = net.parameters();
  NetNodes nodes = forward_impl(graph, net, in, [&](std::size_t i) {
    return graph.input(Tensor(params[i].tensor.shape, params[i].tensor.values), false);
  });
  return {graph.value(nodes.lesion_logits), graph.value(nodes.location_logits),
          graph.value(nodes.features), graph.value(nodes.conv_maps)};
}

// ---------------------------------------------------------------------------
// checkpoint encoding

namespace {

constexpr char kMagic[4] = {'M', 'T', 'L', 'K'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  void tensor(const Shape& shape, const std::vector<double>& values) {
    u32(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) u32(static_cast<std::uint32_t>(d));
    for (double v : values) f64(v);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return std::bit_cast<double>(bits);
  }
  void expect_magic() {
    need(4);
    if (std::memcmp(bytes_.data() + pos_, kMagic, 4) != 0) {
      fail(ErrorKind::ParseError, "checkpoint: bad magic");
    }
    pos_ += 4;
  }
  Tensor tensor() {
    const std::uint32_t ndim = u32();
    if (ndim == 0 || ndim > 8) fail(ErrorKind::ParseError, "checkpoint: bad tensor rank");
    Shape shape(ndim);
    for (auto& d : shape) d = u32();
    const std::size_t n = shape_size(shape);
    need(n * 8);
    std::vector<double> values(n);
    for (auto& v : values) v = f64();
    return Tensor(std::move(shape), std::move(values));
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::ParseError, "checkpoint: truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const DualHeadNet& net, const TrainState& state) {
  const auto& params = net.parameters();
  if (!state.velocity.empty() && state.velocity.size() != params.size()) {
    fail(ErrorKind::ShapeMismatch, "checkpoint: velocity count does not match parameters");
  }
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) w.tensor(p.tensor.shape, p.tensor.values);

  // state section: velocity buffers, optimizer scalars, then the net and
  // preprocessing settings needed to rebuild an evaluator
  w.u32(static_cast<std::uint32_t>(state.velocity.size() + 2));
  for (std::size_t i = 0; i < state.velocity.size(); ++i) {
    if (state.velocity[i].size() != params[i].tensor.size()) {
      fail(ErrorKind::ShapeMismatch, "checkpoint: velocity shape differs from " + params[i].name);
    }
    w.tensor(params[i].tensor.shape, state.velocity[i]);
  }
  w.tensor({6}, {state.base_lr, state.momentum, state.weight_decay, state.plateau_best,
                 state.plateau_since, state.epoch});
  const NetConfig& c = net.config();
  std::vector<double> setup = {static_cast<double>(c.input_size), static_cast<double>(c.pool),
                               c.head_weight_lr_mult, c.head_bias_lr_mult, state.eval_scale};
  setup.insert(setup.end(), state.channel_mean.begin(), state.channel_mean.end());
  w.tensor({setup.size()}, setup);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.expect_magic();
  if (const auto v = r.u32(); v != kVersion) {
    fail(ErrorKind::ParseError, "checkpoint: unsupported version " + std::to_string(v));
  }
  const std::uint32_t count = r.u32();
  if (count < kStemParams + 4 || (count - kStemParams - 4) % kBlockParams != 0) {
    fail(ErrorKind::ParseError, "checkpoint: unexpected parameter count " + std::to_string(count));
  }
  std::vector<Tensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) tensors.push_back(r.tensor());

  const std::uint32_t state_count = r.u32();
  if (state_count != 2 && state_count != count + 2) {
    fail(ErrorKind::ParseError, "checkpoint: unexpected state tensor count");
  }
  TrainState state;
  for (std::uint32_t i = 0; i + 2 < state_count; ++i) {
    Tensor t = r.tensor();
    if (t.shape != tensors[i].shape) fail(ErrorKind::ParseError, "checkpoint: velocity shape");
    state.velocity.push_back(std::move(t.values));
  }
  const Tensor scalars = r.tensor();
  const Tensor setup = r.tensor();
  if (!r.done()) fail(ErrorKind::ParseError, "checkpoint: trailing bytes");
  if (scalars.size() != 6 || setup.size() < 5) fail(ErrorKind::ParseError, "checkpoint: bad state");
  state.base_lr = scalars[0];
  state.momentum = scalars[1];
  state.weight_decay = scalars[2];
  state.plateau_best = scalars[3];
  state.plateau_since = scalars[4];
  state.epoch = scalars[5];
  state.eval_scale = setup[4];
  state.channel_mean.assign(setup.values.begin() + 5, setup.values.end());

  const Tensor& stem = tensors[0];
  if (stem.rank() != 4 || stem.dim(2) != stem.dim(3)) {
    fail(ErrorKind::ParseError, "checkpoint: stem weights are not [K,C,k,k]");
  }
  NetConfig c;
  c.channels = stem.dim(0);
  c.in_channels = stem.dim(1);
  c.kernel = stem.dim(2);
  c.input_size = static_cast<std::size_t>(setup[0]);
  c.pool = static_cast<std::size_t>(setup[1]);
  c.head_weight_lr_mult = setup[2];
  c.head_bias_lr_mult = setup[3];
  c.residual_blocks = (count - kStemParams - 4) / kBlockParams;
  const Tensor& lesion_w = tensors[count - 4];
  const Tensor& location_w = tensors[count - 2];
  if (lesion_w.rank() != 2 || location_w.rank() != 2) {
    fail(ErrorKind::ParseError, "checkpoint: head weights are not matrices");
  }

  Checkpoint ck{build(c, lesion_w.dim(1), location_w.dim(1), 0), std::move(state)};
  auto& params = ck.net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].tensor.shape != tensors[i].shape) {
      fail(ErrorKind::ParseError, "checkpoint: " + params[i].name + " has shape " +
                                      shape_string(tensors[i].shape));
    }
    params[i].tensor.values = std::move(tensors[i].values);
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const DualHeadNet& net,
                     const TrainState& state) {
  const auto bytes = encode_checkpoint(net, state);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace mtlk
