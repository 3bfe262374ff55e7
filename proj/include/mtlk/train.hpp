#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlk/data.hpp"
#include "mtlk/eval.hpp"
#include "mtlk/network.hpp"
#include "mtlk/objective.hpp"
#include "mtlk/optimizer.hpp"

namespace mtlk {

// Everything needed to reproduce a training or cross-validation run.
struct RunConfig {
  NetConfig net;
  SgdConfig optimizer;
  AugmentConfig data;
  ObjectiveConfig objective;  // objective.mode is the run mode
  bool ten_crop = false;      // evaluation-time 10-crop fusion
  std::size_t epochs = 10;
  std::size_t batch_size = 20;
  std::size_t pretrain_epochs = 0;  // location-only warmup of the trunk, 0 = off
  std::uint64_t seed = 0;
  std::size_t folds = 5;
  std::optional<std::size_t> validation_fold;  // train: hold out this fold for validation
  std::size_t threads = 1;                     // cv: folds trained concurrently
  std::string manifest;
  std::string out_dir;
};

void validate(const RunConfig& cfg);
nlohmann::json to_json(const RunConfig& cfg);
// Missing fields keep their defaults; unknown fields are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

struct Predictions {
  ScoreMatrix lesion;    // sigmoid activations
  ScoreMatrix location;  // softmax activations
  LossBreakdown loss;    // mean over the dataset
};

// Deterministic evaluation: center view, or the mean of the 10-crop
// activations when `ten_crop` is set.
Predictions predict(const DualHeadNet& net, const Dataset& ds, const AugmentConfig& aug,
                    std::span<const double> channel_mean, bool ten_crop,
                    const ObjectiveConfig& objective = {});

MetricReport evaluate(const Predictions& p, const Dataset& ds, TaskMode mode);

struct EpochLog {
  std::size_t epoch = 0;
  LossBreakdown train;
  std::optional<LossBreakdown> validation;
  std::optional<MetricReport> metrics;
  double lr = 0.0;
};

nlohmann::json to_json(const EpochLog& log, TaskMode mode);

struct TrainResult {
  DualHeadNet net;
  SgdState optimizer;
  std::vector<double> channel_mean;
  std::vector<EpochLog> log;
  DualHeadNet best_net;
  std::size_t best_epoch = 0;
};

TrainResult train(const Dataset& train_set, const Dataset* validation, const RunConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

TrainState train_state(const TrainResult& result, const AugmentConfig& aug, std::size_t epoch);

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::size_t> test_indices;
  MetricReport metrics;
};

struct CvReport {
  TaskMode mode = TaskMode::Mtl;
  std::vector<FoldResult> folds;
  MetricReport mean;  // per-metric mean over folds
};

// Trains on F-1 folds and evaluates on the held-out one, for every fold.
// Fold f uses seed cfg.seed + f. Folds are assigned from cfg.seed when the
// dataset carries none.
CvReport cross_validate(const Dataset& ds, const RunConfig& cfg, TaskMode mode);

nlohmann::json to_json(const CvReport& report);

}  // namespace mtlk
