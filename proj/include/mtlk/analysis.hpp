#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlk/data.hpp"
#include "mtlk/network.hpp"

namespace mtlk {

// Pooled trunk features, one row per indexed image, with the image's lesion
// names for match flagging.
struct FeatureIndex {
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<double> features;  // ids.size() x dim
  std::vector<std::vector<std::string>> lesions;

  std::size_t size() const { return ids.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }
};

// Features come from the deterministic evaluation view (center crop, no flip).
FeatureIndex build_index(const DualHeadNet& net, const Dataset& ds, const AugmentConfig& aug,
                         std::span<const double> channel_mean);

struct Neighbor {
  std::string id;
  double distance = 0.0;
};

// k nearest rows by Euclidean distance, ascending; ties by ascending id.
std::vector<Neighbor> retrieve(const FeatureIndex& index, std::span<const double> query, std::size_t k);

struct RetrievalEntry {
  std::string query_id;
  std::vector<Neighbor> neighbors;
  std::vector<bool> matches;  // neighbor shares at least one lesion name with the query
};

struct RetrievalReport {
  std::size_t k = 0;
  std::vector<RetrievalEntry> entries;
  double match_rate = 0.0;  // over all neighbor slots
};

RetrievalReport retrieval_report(const FeatureIndex& index, const FeatureIndex& queries, std::size_t k);
nlohmann::json to_json(const RetrievalReport& report);

// Class activation map: sum_k w[k] * maps[k], min-max normalized to [0,1]
// (a constant map becomes all 0.5).
struct AttentionMap {
  Head head = Head::Lesion;
  std::size_t class_index = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> raw;
  std::vector<double> values;
  std::optional<Tensor> upsampled;  // [1,H,W]
};

// `maps` is [K,h,w] for one image; `weights` has K entries.
AttentionMap attention_from_maps(const Tensor& maps, std::span<const double> weights);

// Runs the net on a single preprocessed [C,H,W] image. The head bias is
// ignored. `upsample` bilinearly resizes the normalized map to H x W.
AttentionMap attention(const DualHeadNet& net, const Tensor& image, Head head,
                       std::size_t class_index, bool upsample);

nlohmann::json attention_sidecar(const AttentionMap& map, const std::string& image_id,
                                 const std::string& class_name);

}  // namespace mtlk
