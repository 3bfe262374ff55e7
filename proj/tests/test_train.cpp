#include <algorithm>
#include <functional>

#include "doctest.h"
#include "mtlk/error.hpp"
#include "mtlk/train.hpp"

using namespace mtlk;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an mtlk::Error");
  return ErrorKind::IoError;
}

Dataset dataset(std::size_t n, std::uint64_t seed = 0) {
  SynthSpec spec;
  spec.count = n;
  spec.seed = seed;
  return synthesize(spec);
}

RunConfig quick_config(std::size_t epochs) {
  RunConfig cfg;
  cfg.epochs = epochs;
  return cfg;
}

bool same_parameters(const DualHeadNet& a, const DualHeadNet& b) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    if (a.parameters()[i].tensor.values != b.parameters()[i].tensor.values) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("run configuration json") {
  RunConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 12;
  cfg.objective.mode = TaskMode::LesionOnly;
  cfg.optimizer.plateau.patience = 2;
  cfg.net.channels = 6;
  cfg.validation_fold = 1;
  cfg.manifest = "data/manifest.jsonl";
  const auto back = run_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  CHECK(back.objective.mode == TaskMode::LesionOnly);
  CHECK(back.validation_fold == std::optional<std::size_t>{1});

  CHECK(kind_of([] { run_config_from_json(nlohmann::json{{"epochz", 3}}); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] { run_config_from_json(nlohmann::json{{"net", {{"chanels", 3}}}}); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] {
          RunConfig c;
          c.data.crop = 24;
          validate(c);
        }) == ErrorKind::BadConfig);
}

TEST_CASE("zero epochs leaves the initialization untouched") {
  const auto ds = dataset(20);
  const auto r = train(ds, nullptr, quick_config(0));
  CHECK(r.log.empty());
  CHECK(same_parameters(r.net, build(NetConfig{}, 6, 5, derive_seed(0, 0))));
}

TEST_CASE("training is deterministic in its seed") {
  const auto ds = dataset(60);
  auto cfg = quick_config(2);
  cfg.seed = 5;
  const auto a = train(ds, &ds, cfg);
  const auto b = train(ds, &ds, cfg);
  REQUIRE(a.log.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(to_json(a.log[e], TaskMode::Mtl).dump() == to_json(b.log[e], TaskMode::Mtl).dump());
  }
  CHECK(same_parameters(a.net, b.net));
  CHECK(encode_checkpoint(a.net, train_state(a, cfg.data, 2)) == encode_checkpoint(b.net, train_state(b, cfg.data, 2)));
  cfg.seed = 6;
  CHECK_FALSE(same_parameters(a.net, train(ds, nullptr, cfg).net));
}

TEST_CASE("training reduces the loss") {
  const auto ds = dataset(200);
  const auto r = train(ds, nullptr, quick_config(6));
  REQUIRE(r.log.size() == 6);
  CHECK(r.log[5].train.total < r.log[0].train.total);
  for (const auto& e : r.log) {
    CHECK(e.train.total == doctest::Approx(e.train.lesion_loss + e.train.location_loss + e.train.reg));
  }
}

TEST_CASE("single-task modes freeze the other head and drop its loss") {
  const auto ds = dataset(40);
  auto cfg = quick_config(2);
  cfg.objective.mode = TaskMode::LesionOnly;
  const auto r = train(ds, &ds, cfg);
  const auto init = build(NetConfig{}, 6, 5, derive_seed(0, 0));
  CHECK(r.net.head_weights(Head::Location).tensor.values == init.head_weights(Head::Location).tensor.values);
  CHECK(r.net.head_weights(Head::Lesion).tensor.values != init.head_weights(Head::Lesion).tensor.values);
  const auto j = to_json(r.log[0], TaskMode::LesionOnly);
  CHECK_FALSE(j["train"].contains("location_loss"));
  CHECK(j["train"].contains("lesion_loss"));
  CHECK_FALSE(j["metrics"].contains("location"));

  cfg.objective.mode = TaskMode::LocationOnly;
  const auto loc = to_json(train(ds, &ds, cfg).log[0], TaskMode::LocationOnly);
  CHECK_FALSE(loc["train"].contains("lesion_loss"));
  CHECK_FALSE(loc["metrics"].contains("lesion"));
}

TEST_CASE("a tiny dataset can be memorized") {
  SynthSpec spec;
  spec.count = 20;
  spec.seed = 3;
  spec.glyph_contrast = 0.6;
  spec.glyphs_per_lesion = 4;
  const auto ds = synthesize(spec);
  auto cfg = quick_config(300);
  cfg.batch_size = 4;
  cfg.optimizer.lr = 0.01;
  cfg.optimizer.plateau.patience = 1000;
  cfg.data.flip_prob = 0.0;
  cfg.data.jitter_min = cfg.data.jitter_max = cfg.data.eval_scale;
  const auto r = train(ds, nullptr, cfg);
  const auto p = predict(r.net, ds, cfg.data, r.channel_mean, false, cfg.objective);
  CHECK(evaluate(p, ds, TaskMode::Mtl).lesion->map_image > 0.95);
}

TEST_CASE("ten-crop prediction on symmetric images equals the center view") {
  auto ds = dataset(6);
  for (auto& s : ds.samples) {
    const std::size_t h = s.image.dim(1), w = s.image.dim(2);
    for (std::size_t c = 0; c < s.image.dim(0); ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w / 2; ++x) s.image[(c * h + y) * w + (w - 1 - x)] = s.image[(c * h + y) * w + x];
      }
    }
  }
  const auto net = build(NetConfig{}, 6, 5, 1);
  AugmentConfig aug{28, 28, 28, 28, 0.0};
  const std::vector<double> mean{0.5, 0.5, 0.5};
  const auto center = predict(net, ds, aug, mean, false);
  const auto ten = predict(net, ds, aug, mean, true);
  for (std::size_t i = 0; i < center.lesion.values.size(); ++i) {
    CHECK(ten.lesion.values[i] == doctest::Approx(center.lesion.values[i]).epsilon(1e-12));
  }
  for (std::size_t i = 0; i < center.location.values.size(); ++i) {
    CHECK(ten.location.values[i] == doctest::Approx(center.location.values[i]).epsilon(1e-12));
  }
}

TEST_CASE("prediction rejects incompatible datasets") {
  const auto net = build(NetConfig{}, 4, 5, 1);
  const auto ds = dataset(3);
  CHECK(kind_of([&] { predict(net, ds, AugmentConfig{}, std::vector<double>(3, 0.0), false); }) ==
        ErrorKind::DimensionMismatch);
}

TEST_CASE("cross-validation") {
  const auto ds = dataset(100);
  auto cfg = quick_config(1);
  cfg.seed = 2;
  const auto report = cross_validate(ds, cfg, TaskMode::Mtl);
  REQUIRE(report.folds.size() == 5);
  std::vector<int> seen(100, 0);
  for (const auto& f : report.folds) {
    for (auto i : f.test_indices) ++seen[i];
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
  CHECK(report.mean.lesion.has_value());
  CHECK(report.mean.location.has_value());

  double mean_map = 0.0;
  for (const auto& f : report.folds) mean_map += f.metrics.lesion->map_class / 5.0;
  CHECK(report.mean.lesion->map_class == doctest::Approx(mean_map).epsilon(1e-12));

  CHECK(to_json(cross_validate(ds, cfg, TaskMode::Mtl)).dump() == to_json(report).dump());

  const auto lesion_only = cross_validate(ds, cfg, TaskMode::LesionOnly);
  CHECK_FALSE(lesion_only.mean.location.has_value());
  CHECK(lesion_only.mean.lesion.has_value());

  auto threaded = cfg;
  threaded.threads = 3;
  CHECK(to_json(cross_validate(ds, threaded, TaskMode::Mtl)).dump() == to_json(report).dump());
}
