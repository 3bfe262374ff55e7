#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mtlk/tensor.hpp"

namespace mtlk {

enum class Head { Lesion, Location };

const char* to_string(Head head);

struct NetConfig {
  std::size_t in_channels = 3;
  std::size_t input_size = 28;  // square input, H == W
  std::size_t channels = 8;     // stem output width, also the pooled feature width K
  std::size_t kernel = 3;
  std::size_t pool = 2;
  std::size_t residual_blocks = 2;
  double head_weight_lr_mult = 10.0;
  double head_bias_lr_mult = 20.0;
};

struct Parameter {
  std::string name;
  Tensor tensor;
  double lr_multiplier = 1.0;
  bool trainable = true;
};

// Shared convolutional trunk feeding two sibling linear heads:
//
//   conv(C->K) + bias -> relu -> maxpool -> residual blocks -> global avg pool
//     -> features [B,K] -> lesion head [K,P] + bias -> lesion logits
//                       -> location head [K,Q] + bias -> location logits
//
// Each residual block computes relu(x + conv_b(relu(conv_a(x) + b_a)) + b_b).
class DualHeadNet {
 public:
  const NetConfig& config() const { return config_; }
  std::size_t lesion_count() const { return lesions_; }
  std::size_t location_count() const { return locations_; }
  std::size_t feature_width() const { return config_.channels; }
  std::size_t conv_map_size() const { return config_.input_size / config_.pool; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  Parameter& head_weights(Head head);
  const Parameter& head_weights(Head head) const;
  Parameter& head_bias(Head head);
  const Parameter& head_bias(Head head) const;

  // Zeroes both heads, weights and biases.
  void zero_heads();
  void zero_grad();

  friend DualHeadNet build(const NetConfig& config, std::size_t lesions, std::size_t locations,
                           std::uint64_t seed);

 private:
  NetConfig config_;
  std::size_t lesions_ = 0;
  std::size_t locations_ = 0;
  std::vector<Parameter> params_;
};

void validate(const NetConfig& config);

DualHeadNet build(const NetConfig& config, std::size_t lesions, std::size_t locations,
                  std::uint64_t seed);

struct NetNodes {
  NodeId lesion_logits;
  NodeId location_logits;
  NodeId features;
  NodeId conv_maps;
  std::vector<NodeId> parameters;  // in DualHeadNet::parameters() order
};

// Records the forward pass on `graph` with the net's parameters bound as
// trainable leaves.
NetNodes forward(Graph& graph, DualHeadNet& net, NodeId batch);

struct NetOutputs {
  Tensor lesion_logits;    // [B,P]
  Tensor location_logits;  // [B,Q]
  Tensor features;         // [B,K]
  Tensor conv_maps;        // [B,K,h,w]
};

// Inference-only forward; parameters are copied, the net is left untouched.
NetOutputs forward(const DualHeadNet& net, const Tensor& batch);

// Binary checkpoint: "MTLK", u32 version, u32 tensor count, tensors, then the
// state section in the same encoding. Each tensor is u32 ndim, u32 dims, f64
// values, all little-endian.
struct TrainState {
  std::vector<std::vector<double>> velocity;  // one per parameter, may be empty
  double base_lr = 0.0;
  double momentum = 0.0;
  double weight_decay = 0.0;
  double plateau_best = 0.0;
  double plateau_since = 0.0;
  double epoch = 0.0;
  double eval_scale = 0.0;
  std::vector<double> channel_mean;
};

struct Checkpoint {
  DualHeadNet net;
  TrainState state;
};

std::vector<std::uint8_t> encode_checkpoint(const DualHeadNet& net, const TrainState& state);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const DualHeadNet& net,
                     const TrainState& state);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mtlk
