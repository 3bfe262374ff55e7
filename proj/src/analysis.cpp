#include "mtlk/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtlk/error.hpp"

namespace mtlk {

using nlohmann::json;

FeatureIndex build_index(const DualHeadNet& net, const Dataset& ds, const AugmentConfig& aug,
                         std::span<const double> channel_mean) {
  FeatureIndex index;
  index.dim = net.feature_width();
  if (ds.size() > 0 && ds.lesion_count() == 0) fail(ErrorKind::ShapeMismatch, "dataset has no lesion vocabulary");
  for (const auto& s : ds.samples) {
    if (s.image.rank() != 3 || s.image.dim(0) != net.config().in_channels) {
      fail(ErrorKind::ShapeMismatch, s.id + ": image " + shape_string(s.image.shape) +
                                         " does not match the net");
    }
    Tensor view = center_view(s, aug, channel_mean);
    Tensor batch(Shape{1, view.dim(0), view.dim(1), view.dim(2)}, std::move(view.values));
    const NetOutputs out = forward(net, batch);
    index.ids.push_back(s.id);
    index.features.insert(index.features.end(), out.features.values.begin(), out.features.values.end());
    std::vector<std::string> names;
    for (std::size_t i = 0; i < s.lesions.size(); ++i) {
      if (s.lesions[i]) names.push_back(ds.lesion_names[i]);
    }
    index.lesions.push_back(std::move(names));
  }
  return index;
}

std::vector<Neighbor> retrieve(const FeatureIndex& index, std::span<const double> query, std::size_t k) {
  if (k > index.size()) {
    fail(ErrorKind::BadK, "k=" + std::to_string(k) + " exceeds index size " + std::to_string(index.size()));
  }
  if (query.size() != index.dim) {
    fail(ErrorKind::ShapeMismatch, "query has " + std::to_string(query.size()) + " features, index has " +
                                       std::to_string(index.dim));
  }
  std::vector<double> dist(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto row = index.row(i);
    double s = 0.0;
    for (std::size_t d = 0; d < index.dim; ++d) s += (row[d] - query[d]) * (row[d] - query[d]);
    dist[i] = std::sqrt(s);
  }
  std::vector<std::size_t> order(index.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dist[a] != dist[b]) return dist[a] < dist[b];
    return index.ids[a] < index.ids[b];
  });
  std::vector<Neighbor> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({index.ids[order[i]], dist[order[i]]});
  return out;
}

RetrievalReport retrieval_report(const FeatureIndex& index, const FeatureIndex& queries, std::size_t k) {
  RetrievalReport report;
  report.k = k;
  std::size_t slots = 0, hits = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    RetrievalEntry e;
    e.query_id = queries.ids[q];
    e.neighbors = retrieve(index, queries.row(q), k);
    const auto& mine = queries.lesions[q];
    for (const auto& n : e.neighbors) {
      const auto pos = static_cast<std::size_t>(
          std::find(index.ids.begin(), index.ids.end(), n.id) - index.ids.begin());
      const auto& theirs = index.lesions[pos];
      const bool match = std::any_of(mine.begin(), mine.end(), [&](const std::string& name) {
        return std::find(theirs.begin(), theirs.end(), name) != theirs.end();
      });
      e.matches.push_back(match);
      ++slots;
      hits += match ? 1 : 0;
    }
    report.entries.push_back(std::move(e));
  }
  report.match_rate = slots ? static_cast<double>(hits) / static_cast<double>(slots) : 0.0;
  return report;
}

json to_json(const RetrievalReport& r) {
  json entries = json::array();
  for (const auto& e : r.entries) {
    json neighbors = json::array();
    for (std::size_t i = 0; i < e.neighbors.size(); ++i) {
      neighbors.push_back({{"id", e.neighbors[i].id},
                           {"distance", e.neighbors[i].distance},
                           {"match", static_cast<bool>(e.matches[i])}});
    }
    entries.push_back({{"query", e.query_id}, {"neighbors", neighbors}});
  }
  return json{{"k", r.k}, {"match_rate", r.match_rate}, {"queries", entries}};
}

AttentionMap attention_from_maps(const Tensor& maps, std::span<const double> weights) {
  if (maps.rank() != 3) fail(ErrorKind::ShapeMismatch, "attention: maps must be [K,h,w]");
  if (weights.size() != maps.dim(0)) {
    fail(ErrorKind::ShapeMismatch, "attention: " + std::to_string(weights.size()) + " weights for " +
                                       std::to_string(maps.dim(0)) + " maps");
  }
  AttentionMap m;
  m.height = maps.dim(1);
  m.width = maps.dim(2);
  const std::size_t area = m.height * m.width;
  m.raw.assign(area, 0.0);
  for (std::size_t k = 0; k < weights.size(); ++k) {
    for (std::size_t i = 0; i < area; ++i) m.raw[i] += weights[k] * maps[k * area + i];
  }
  const auto [lo, hi] = std::minmax_element(m.raw.begin(), m.raw.end());
  const double range = *hi - *lo;
  m.values.resize(area);
  for (std::size_t i = 0; i < area; ++i) m.values[i] = range > 0 ? (m.raw[i] - *lo) / range : 0.5;
  return m;
}

AttentionMap attention(const DualHeadNet& net, const Tensor& image, Head head,
                       std::size_t class_index, bool upsample) {
  const std::size_t classes = head == Head::Lesion ? net.lesion_count() : net.location_count();
  if (class_index >= classes) {
    fail(ErrorKind::BadClass, "class " + std::to_string(class_index) + " outside 0.." +
                                  std::to_string(classes - 1) + " for the " + to_string(head) + " head");
  }
  if (image.rank() != 3) fail(ErrorKind::ShapeMismatch, "attention: image must be [C,H,W]");
  Tensor batch(Shape{1, image.dim(0), image.dim(1), image.dim(2)}, image.values);
  const NetOutputs out = forward(net, batch);

  const Tensor& w = net.head_weights(head).tensor;  // [K, classes]
  const std::size_t k = w.dim(0);
  std::vector<double> weights(k);
  for (std::size_t i = 0; i < k; ++i) weights[i] = w[i * classes + class_index];
  Tensor maps(Shape{out.conv_maps.dim(1), out.conv_maps.dim(2), out.conv_maps.dim(3)}, out.conv_maps.values);

  AttentionMap m = attention_from_maps(maps, weights);
  m.head = head;
  m.class_index = class_index;
  if (upsample) {
    Tensor small(Shape{1, m.height, m.width}, m.values);
    m.upsampled = resize_bilinear(small, image.dim(1), image.dim(2));
  }
  return m;
}

json attention_sidecar(const AttentionMap& m, const std::string& image_id, const std::string& class_name) {
  json j{{"image", image_id},
         {"head", to_string(m.head)},
         {"class_index", m.class_index},
         {"class", class_name},
         {"height", m.height},
         {"width", m.width},
         {"raw_min", *std::min_element(m.raw.begin(), m.raw.end())},
         {"raw_max", *std::max_element(m.raw.begin(), m.raw.end())}};
  if (m.upsampled) {
    j["upsampled_height"] = m.upsampled->dim(1);
    j["upsampled_width"] = m.upsampled->dim(2);
  }
  return j;
}

}  // namespace mtlk
