#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlk/objective.hpp"
#include "mtlk/train.hpp"

namespace mtlk {

namespace fs = std::filesystem;

// Library entry points behind the `mtlk` subcommands. Each returns the
// document the CLI prints and writes its file artifacts as described.

// Writes manifest.jsonl and images/ under `out_dir`.
void cmd_synth(const fs::path& spec_file, const fs::path& out_dir, std::optional<std::uint64_t> seed);

struct TrainOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::string> mode;
  std::optional<std::string> manifest;
  std::optional<std::string> out_dir;
  std::optional<double> lr;
  std::optional<std::size_t> threads;
};

RunConfig apply(RunConfig cfg, const TrainOverrides& o);

// Writes config.json, train_log.jsonl (one object per epoch), init.mtlk,
// final.mtlk and best.mtlk under cfg.out_dir. Returns the final epoch log.
nlohmann::json cmd_train(const RunConfig& cfg);

struct EvalOptions {
  bool ten_crop = false;
  TaskMode mode = TaskMode::Mtl;
  std::optional<fs::path> scores_out;  // directory for lesion_scores.csv / location_scores.csv
};

nlohmann::json cmd_eval(const fs::path& checkpoint, const fs::path& manifest, const EvalOptions& opt);

// Metrics straight from score files (the path cmd_eval's CSVs feed into).
nlohmann::json cmd_metrics(const std::optional<fs::path>& lesion_scores,
                           const std::optional<fs::path>& location_scores, const fs::path& manifest);

nlohmann::json cmd_ensemble(const fs::path& scores_a, const fs::path& scores_b, const fs::path& manifest,
                            ScoreKind kind, bool mean, const std::optional<fs::path>& scores_out);

nlohmann::json cmd_cv(const RunConfig& cfg);

std::string cmd_correlate(const fs::path& manifest);

nlohmann::json cmd_retrieve(const fs::path& checkpoint, const fs::path& index_manifest,
                            const fs::path& query_manifest, std::size_t k);

struct AttentionOptions {
  Head head = Head::Lesion;
  std::optional<std::size_t> class_index;  // default: first ground-truth class of the image
  std::vector<std::string> ids;            // default: every image
  bool upsample = true;
};

// Writes <id>_<head>.pgm and <id>_<head>.json per image under `out_dir`.
nlohmann::json cmd_attention(const fs::path& checkpoint, const fs::path& manifest, const fs::path& out_dir,
                             const AttentionOptions& opt);

// Full command-line front end. Errors print one `error: <Kind>: <message>`
// line to `err` and return a nonzero code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mtlk
