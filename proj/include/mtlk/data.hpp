#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlk/rng.hpp"
#include "mtlk/tensor.hpp"

namespace mtlk {

// Row-major 0/1 matrix (lesion indicators).
struct BinaryMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> values;

  std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const std::uint8_t> row(std::size_t r) const {
    return {values.data() + r * cols, cols};
  }
};

// One labelled image. `lesions` is the binary indicator vector (length P,
// at least one entry set); `location` is 1-based in 1..Q.
struct Sample {
  std::string id;
  Tensor image;  // [C,H,W], values in [0,1] on load
  std::vector<std::uint8_t> lesions;
  int location = 1;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> lesion_names;
  std::vector<std::string> location_names;
  std::vector<std::size_t> folds;  // empty, or one fold index per sample
  std::size_t fold_count = 0;

  std::size_t size() const { return samples.size(); }
  std::size_t lesion_count() const { return lesion_names.size(); }
  std::size_t location_count() const { return location_names.size(); }

  BinaryMatrix lesion_matrix() const;
  std::vector<int> locations() const;
  std::vector<std::string> ids() const;
};

// Checks the Sample invariants against the dataset vocabulary.
void validate(const Dataset& ds);

// Shuffled round-robin assignment: fold sizes differ by at most one.
void assign_folds(Dataset& ds, std::size_t fold_count, std::uint64_t seed);
std::vector<std::size_t> fold_members(const Dataset& ds, std::size_t fold);
Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

// ---------------------------------------------------------------------------
// files

Tensor read_ppm(const std::filesystem::path& path);
// 8-bit binary PPM (P6) for 3 channels, PGM (P5) for 1 channel.
void write_pnm(const std::filesystem::path& path, const Tensor& image);

// JSON-lines manifest; image paths are relative to the manifest's directory.
Dataset load_manifest(const std::filesystem::path& path);
// Writes `manifest.jsonl` plus one PPM per sample under `dir/images/`.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// synthetic data

// Planted correlation generator. Each sample draws a primary lesion uniformly,
// a location from row `correlation[lesion]`, and optionally extra lesions.
// The image is a location-specific striped background with lesion-specific
// glyphs stamped on top, plus Gaussian noise, quantized to 8 bits.
struct SynthSpec {
  std::size_t lesions = 6;
  std::size_t locations = 5;
  std::size_t count = 2000;
  std::vector<std::vector<double>> correlation;  // P x Q, row-stochastic; empty = diagonal 0.8
  double noise = 0.1;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  double secondary_prob = 0.0;
  double background_contrast = 0.25;
  double glyph_contrast = 0.35;
  std::size_t glyphs_per_lesion = 2;
  std::size_t glyph_size = 5;
  std::uint64_t seed = 0;
};

// Row i puts `strength` on location (i mod Q) and spreads the rest evenly.
std::vector<std::vector<double>> diagonal_correlation(std::size_t lesions, std::size_t locations,
                                                      double strength);
void validate(const SynthSpec& spec);
Dataset synthesize(const SynthSpec& spec);

SynthSpec synth_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SynthSpec& spec);

// ---------------------------------------------------------------------------
// augmentation

struct AugmentConfig {
  std::size_t jitter_min = 36;
  std::size_t jitter_max = 48;
  std::size_t crop = 28;
  std::size_t eval_scale = 36;
  double flip_prob = 0.5;
};

void validate(const AugmentConfig& cfg);

// Bilinear resize with corner-aligned sampling (output corners map onto
// input corners).
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);
// Resize so the shorter side equals `side`, keeping the aspect ratio.
Tensor resize_shorter(const Tensor& image, std::size_t side);
Tensor subtract_mean(Tensor image, std::span<const double> channel_mean);
Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t size);
Tensor flip_horizontal(const Tensor& image);

// Per-channel mean over every pixel of every sample.
std::vector<double> channel_mean(const Dataset& ds);

// Scale jitter -> mean subtraction -> random crop -> random horizontal flip.
Tensor augment(const Sample& sample, Rng& rng, const AugmentConfig& cfg,
               std::span<const double> channel_mean);

struct CropOffset {
  std::size_t top;
  std::size_t left;
  friend bool operator==(CropOffset, CropOffset) = default;
};

// Top-left, top-right, bottom-left, bottom-right, center.
std::array<CropOffset, 5> five_crop_offsets(std::size_t height, std::size_t width, std::size_t crop);
// The five crops of `image` followed by the horizontal flip of each, same order.
std::vector<Tensor> ten_crop(const Tensor& image, std::size_t crop);
// Resizes to the evaluation scale and subtracts the mean before cropping.
std::vector<Tensor> ten_crop(const Sample& sample, const AugmentConfig& cfg,
                             std::span<const double> channel_mean);
// Single deterministic evaluation view: eval-scale resize, mean, center crop.
Tensor center_view(const Sample& sample, const AugmentConfig& cfg,
                   std::span<const double> channel_mean);

}  // namespace mtlk
