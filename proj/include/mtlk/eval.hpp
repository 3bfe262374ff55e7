#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlk/data.hpp"

namespace mtlk {

enum class ScoreKind { Lesion, Location };

const char* to_string(ScoreKind kind);

// N x K per-image scores, one row per sample id.
struct ScoreMatrix {
  ScoreKind kind = ScoreKind::Lesion;
  std::vector<std::string> ids;
  std::vector<std::string> class_names;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

void validate(const ScoreMatrix& s);

// Descending-score order; equal scores keep ascending original index.
std::vector<std::size_t> ranking(std::span<const double> scores);

// Sum over cut-offs of precision(j) * (recall(j) - recall(j-1)).
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct MapResult {
  double mean = 0.0;
  // One entry per class (map_class) or image (map_image); empty when the item
  // has no positive label and was left out of the mean.
  std::vector<std::optional<double>> per_item;
  std::vector<std::size_t> excluded;
};

MapResult map_class(const ScoreMatrix& scores, const BinaryMatrix& labels);
MapResult map_image(const ScoreMatrix& scores, const BinaryMatrix& labels);

// Fraction of rows whose 1-based label is among the k best-scoring columns.
double top_k_accuracy(const ScoreMatrix& scores, std::span<const int> labels, std::size_t k);

struct CorrelationMatrix {
  std::size_t lesions = 0;
  std::size_t locations = 0;
  std::vector<double> values;               // P x Q
  std::vector<std::size_t> lesion_counts;   // N_i
  std::vector<std::size_t> location_counts; // M_j
  std::vector<std::size_t> empty_rows;      // lesions with N_i == 0

  double at(std::size_t i, std::size_t j) const { return values[i * locations + j]; }
};

// R_ij = |{images with lesion i and location j}| / N_i.
CorrelationMatrix correlation_matrix(const Dataset& ds);

ScoreMatrix ensemble_max(const ScoreMatrix& a, const ScoreMatrix& b);
ScoreMatrix ensemble_mean(const ScoreMatrix& a, const ScoreMatrix& b);

// ---------------------------------------------------------------------------
// reports and files

struct LesionMetrics {
  double map_class = 0.0;
  double map_image = 0.0;
  std::vector<std::optional<double>> class_ap;
  std::vector<std::string> excluded_classes;
};

struct LocationMetrics {
  double top1 = 0.0;
  double top3 = 0.0;
};

struct MetricReport {
  std::optional<LesionMetrics> lesion;
  std::optional<LocationMetrics> location;
  std::vector<std::string> lesion_names;
};

LesionMetrics lesion_metrics(const ScoreMatrix& scores, const BinaryMatrix& labels);
LocationMetrics location_metrics(const ScoreMatrix& scores, std::span<const int> labels);

nlohmann::json to_json(const MetricReport& report);
nlohmann::json to_json(const CorrelationMatrix& r, const Dataset& ds);

// CSV: header `id,<class names...>`, one row per image, values at full
// round-trip precision.
void write_scores_csv(const std::filesystem::path& path, const ScoreMatrix& scores);
ScoreMatrix read_scores_csv(const std::filesystem::path& path, ScoreKind kind);
std::string correlation_csv(const CorrelationMatrix& r, const Dataset& ds);

// Reorders `scores` rows to follow `ids`; fails on any missing id.
ScoreMatrix align_rows(const ScoreMatrix& scores, std::span<const std::string> ids);

}  // namespace mtlk
