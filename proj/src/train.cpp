#include "mtlk/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include "mtlk/error.hpp"
#include "mtlk/rng.hpp"

namespace mtlk {

using nlohmann::json;

void validate(const RunConfig& c) {
  validate(c.net);
  validate(c.optimizer);
  validate(c.data);
  if (c.data.crop != c.net.input_size) {
    fail(ErrorKind::BadConfig, "data.crop must equal net.input_size");
  }
  if (c.batch_size == 0) fail(ErrorKind::BadConfig, "batch_size must be positive");
  if (c.folds < 2) fail(ErrorKind::BadConfig, "folds must be at least 2");
  if (c.validation_fold && *c.validation_fold >= c.folds) {
    fail(ErrorKind::BadConfig, "validation_fold must be below folds");
  }
  if (c.threads == 0) fail(ErrorKind::BadConfig, "threads must be positive");
  if (!(c.objective.gamma >= 0)) fail(ErrorKind::BadConfig, "gamma must be nonnegative");
}

// ---------------------------------------------------------------------------
// config json

namespace {

template <typename T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; })) {
      fail(ErrorKind::BadConfig, "unknown field '" + where + it.key() + "'");
    }
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  json j;
  j["mode"] = to_string(c.objective.mode);
  j["net"] = {{"in_channels", c.net.in_channels},
              {"input_size", c.net.input_size},
              {"channels", c.net.channels},
              {"kernel", c.net.kernel},
              {"pool", c.net.pool},
              {"residual_blocks", c.net.residual_blocks},
              {"head_weight_lr_mult", c.net.head_weight_lr_mult},
              {"head_bias_lr_mult", c.net.head_bias_lr_mult}};
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"momentum", c.optimizer.momentum},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"plateau",
                     {{"patience", c.optimizer.plateau.patience},
                      {"threshold", c.optimizer.plateau.threshold},
                      {"factor", c.optimizer.plateau.factor},
                      {"min_lr", c.optimizer.plateau.min_lr}}}};
  j["data"] = {{"jitter_min", c.data.jitter_min},
               {"jitter_max", c.data.jitter_max},
               {"crop", c.data.crop},
               {"eval_scale", c.data.eval_scale},
               {"flip_prob", c.data.flip_prob},
               {"ten_crop", c.ten_crop}};
  j["objective"] = {{"gamma", c.objective.gamma},
                    {"decoupled_reg", c.objective.decoupled_reg},
                    {"aux_weight", c.objective.aux_weight}};
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["seed"] = c.seed;
  j["folds"] = c.folds;
  j["validation_fold"] = c.validation_fold ? json(*c.validation_fold) : json(nullptr);
  j["threads"] = c.threads;
  j["manifest"] = c.manifest;
  j["out_dir"] = c.out_dir;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    if (!j.is_object()) fail(ErrorKind::BadConfig, "config must be a JSON object");
    reject_unknown(j, {"mode", "net", "optimizer", "data", "objective", "epochs", "batch_size",
                       "pretrain_epochs", "seed", "folds", "validation_fold", "threads", "manifest",
                       "out_dir"},
                   "");
    if (j.contains("mode")) c.objective.mode = parse_task_mode(j["mode"].get<std::string>());
    if (j.contains("net")) {
      const auto& n = j["net"];
      reject_unknown(n, {"in_channels", "input_size", "channels", "kernel", "pool", "residual_blocks",
                         "head_weight_lr_mult", "head_bias_lr_mult"},
                     "net.");
      read(n, "in_channels", c.net.in_channels);
      read(n, "input_size", c.net.input_size);
      read(n, "channels", c.net.channels);
      read(n, "kernel", c.net.kernel);
      read(n, "pool", c.net.pool);
      read(n, "residual_blocks", c.net.residual_blocks);
      read(n, "head_weight_lr_mult", c.net.head_weight_lr_mult);
      read(n, "head_bias_lr_mult", c.net.head_bias_lr_mult);
    }
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      reject_unknown(o, {"lr", "momentum", "weight_decay", "plateau"}, "optimizer.");
      read(o, "lr", c.optimizer.lr);
      read(o, "momentum", c.optimizer.momentum);
      read(o, "weight_decay", c.optimizer.weight_decay);
      if (o.contains("plateau")) {
        const auto& p = o["plateau"];
        reject_unknown(p, {"patience", "threshold", "factor", "min_lr"}, "optimizer.plateau.");
        read(p, "patience", c.optimizer.plateau.patience);
        read(p, "threshold", c.optimizer.plateau.threshold);
        read(p, "factor", c.optimizer.plateau.factor);
        read(p, "min_lr", c.optimizer.plateau.min_lr);
      }
    }
    if (j.contains("data")) {
      const auto& d = j["data"];
      reject_unknown(d, {"jitter_min", "jitter_max", "crop", "eval_scale", "flip_prob", "ten_crop"}, "data.");
      read(d, "jitter_min", c.data.jitter_min);
      read(d, "jitter_max", c.data.jitter_max);
      read(d, "crop", c.data.crop);
      read(d, "eval_scale", c.data.eval_scale);
      read(d, "flip_prob", c.data.flip_prob);
      read(d, "ten_crop", c.ten_crop);
    }
    if (j.contains("objective")) {
      const auto& o = j["objective"];
      reject_unknown(o, {"gamma", "decoupled_reg", "aux_weight"}, "objective.");
      read(o, "gamma", c.objective.gamma);
      read(o, "decoupled_reg", c.objective.decoupled_reg);
      read(o, "aux_weight", c.objective.aux_weight);
    }
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    read(j, "pretrain_epochs", c.pretrain_epochs);
    read(j, "seed", c.seed);
    read(j, "folds", c.folds);
    if (j.contains("validation_fold") && !j["validation_fold"].is_null()) {
      c.validation_fold = j["validation_fold"].get<std::size_t>();
    }
    read(j, "threads", c.threads);
    read(j, "manifest", c.manifest);
    read(j, "out_dir", c.out_dir);
  } catch (const json::exception& e) {
    fail(ErrorKind::BadConfig, e.what());
  }
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::BadConfig, path.string() + ": " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  // relative paths inside a config file are relative to the file
  const auto base = path.parent_path();
  if (!c.manifest.empty() && std::filesystem::path(c.manifest).is_relative()) {
    c.manifest = (base / c.manifest).lexically_normal().string();
  }
  if (!c.out_dir.empty() && std::filesystem::path(c.out_dir).is_relative()) {
    c.out_dir = (base / c.out_dir).lexically_normal().string();
  }
  return c;
}

// ---------------------------------------------------------------------------
// batches

namespace {

Tensor stack(const std::vector<Tensor>& images) {
  const Tensor& first = images.front();
  Shape shape{images.size()};
  shape.insert(shape.end(), first.shape.begin(), first.shape.end());
  Tensor out(shape);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape != first.shape) fail(ErrorKind::DimensionMismatch, "images differ in shape");
    std::copy(images[i].values.begin(), images[i].values.end(),
              out.values.begin() + static_cast<std::ptrdiff_t>(i * first.size()));
  }
  return out;
}

BinaryMatrix batch_lesions(const Dataset& ds, std::span<const std::size_t> idx) {
  BinaryMatrix u{idx.size(), ds.lesion_count(), {}};
  for (auto i : idx) u.values.insert(u.values.end(), ds.samples[i].lesions.begin(), ds.samples[i].lesions.end());
  return u;
}

std::vector<int> batch_locations(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<int> v;
  for (auto i : idx) v.push_back(ds.samples[i].location);
  return v;
}

void check_compatible(const DualHeadNet& net, const Dataset& ds) {
  if (net.lesion_count() != ds.lesion_count() || net.location_count() != ds.location_count()) {
    fail(ErrorKind::DimensionMismatch,
         "net has " + std::to_string(net.lesion_count()) + " lesions / " +
             std::to_string(net.location_count()) + " locations, dataset has " +
             std::to_string(ds.lesion_count()) + " / " + std::to_string(ds.location_count()));
  }
  for (const auto& s : ds.samples) {
    if (s.image.rank() != 3 || s.image.dim(0) != net.config().in_channels) {
      fail(ErrorKind::DimensionMismatch, s.id + ": image " + shape_string(s.image.shape) +
                                             " does not match the net's input channels");
    }
  }
}

void add_scaled(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.lesion_loss += w * b.lesion_loss;
  acc.location_loss += w * b.location_loss;
  acc.reg += w * b.reg;
  acc.total += w * b.total;
}

}  // namespace

Predictions predict(const DualHeadNet& net, const Dataset& ds, const AugmentConfig& aug,
                    std::span<const double> channel_mean, bool ten_crop,
                    const ObjectiveConfig& objective) {
  check_compatible(net, ds);
  Predictions p;
  p.lesion.kind = ScoreKind::Lesion;
  p.location.kind = ScoreKind::Location;
  p.lesion.ids = p.location.ids = ds.ids();
  p.lesion.class_names = ds.lesion_names;
  p.location.class_names = ds.location_names;
  p.lesion.rows = p.location.rows = ds.size();
  p.lesion.cols = ds.lesion_count();
  p.location.cols = ds.location_count();
  p.lesion.values.reserve(ds.size() * p.lesion.cols);
  p.location.values.reserve(ds.size() * p.location.cols);

  constexpr std::size_t kChunk = 32;
  const double reg = objective.gamma * squared_norm(net);
  for (std::size_t start = 0; start < ds.size(); start += kChunk) {
    const std::size_t end = std::min(ds.size(), start + kChunk);
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    const std::size_t views = ten_crop ? 10 : 1;
    std::vector<Tensor> images;
    for (auto i : idx) {
      if (ten_crop) {
        for (auto& t : mtlk::ten_crop(ds.samples[i], aug, channel_mean)) images.push_back(std::move(t));
      } else {
        images.push_back(center_view(ds.samples[i], aug, channel_mean));
      }
    }
    const NetOutputs out = forward(net, stack(images));
    const Tensor a = sigmoid_activations(out.lesion_logits);
    const Tensor b = softmax_activations(out.location_logits);
    const std::size_t P = p.lesion.cols, Q = p.location.cols;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < P; ++j) {
        double s = 0.0;
        for (std::size_t v = 0; v < views; ++v) s += a[(r * views + v) * P + j];
        p.lesion.values.push_back(s / static_cast<double>(views));
      }
      for (std::size_t j = 0; j < Q; ++j) {
        double s = 0.0;
        for (std::size_t v = 0; v < views; ++v) s += b[(r * views + v) * Q + j];
        p.location.values.push_back(s / static_cast<double>(views));
      }
    }
  }

  // Loss of the fused probabilities, in the same stable terms as training.
  const double eps = 1e-300;
  LossBreakdown& L = p.loss;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    for (std::size_t j = 0; j < p.lesion.cols; ++j) {
      const double prob = p.lesion.at(i, j);
      L.lesion_loss -= s.lesions[j] ? std::log(std::max(prob, eps)) : std::log(std::max(1.0 - prob, eps));
    }
    L.location_loss -= std::log(std::max(p.location.at(i, static_cast<std::size_t>(s.location - 1)), eps));
  }
  if (ds.size() > 0) {
    L.lesion_loss /= static_cast<double>(ds.size());
    L.location_loss /= static_cast<double>(ds.size());
  }
  if (objective.mode == TaskMode::LesionOnly) L.location_loss = 0.0;
  if (objective.mode == TaskMode::LocationOnly) L.lesion_loss = 0.0;
  L.reg = reg;
  L.total = L.lesion_loss + objective.aux_weight * L.location_loss + L.reg;
  return p;
}

MetricReport evaluate(const Predictions& p, const Dataset& ds, TaskMode mode) {
  MetricReport r;
  r.lesion_names = ds.lesion_names;
  if (mode != TaskMode::LocationOnly) r.lesion = lesion_metrics(p.lesion, ds.lesion_matrix());
  if (mode != TaskMode::LesionOnly) r.location = location_metrics(p.location, ds.locations());
  return r;
}

json to_json(const EpochLog& log, TaskMode mode) {
  auto losses = [mode](const LossBreakdown& b) {
    json j;
    if (mode != TaskMode::LocationOnly) j["lesion_loss"] = b.lesion_loss;
    if (mode != TaskMode::LesionOnly) j["location_loss"] = b.location_loss;
    j["reg"] = b.reg;
    j["total"] = b.total;
    return j;
  };
  json j{{"epoch", log.epoch}, {"lr", log.lr}, {"train", losses(log.train)}};
  if (log.validation) j["validation"] = losses(*log.validation);
  if (log.metrics) j["metrics"] = to_json(*log.metrics);
  return j;
}

namespace {

void set_head_trainable(DualHeadNet& net, TaskMode mode) {
  for (auto& p : net.parameters()) p.trainable = true;
  auto freeze = [&](Head h) {
    net.head_weights(h).trainable = false;
    net.head_bias(h).trainable = false;
  };
  if (mode == TaskMode::LesionOnly) freeze(Head::Location);
  if (mode == TaskMode::LocationOnly) freeze(Head::Lesion);
}

LossBreakdown run_epoch(DualHeadNet& net, SgdState& opt, const Dataset& ds, const RunConfig& cfg,
                        const ObjectiveConfig& objective, std::span<const double> mean, Rng& rng) {
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span(order));

  LossBreakdown epoch;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    std::span<const std::size_t> idx(order.data() + start, end - start);
    std::vector<Tensor> images;
    images.reserve(idx.size());
    for (auto i : idx) images.push_back(augment(ds.samples[i], rng, cfg.data, mean));

    Graph graph;
    NodeId batch = graph.input(stack(images), false);
    net.zero_grad();
    const BinaryMatrix u = batch_lesions(ds, idx);
    const std::vector<int> v = batch_locations(ds, idx);
    JointLoss loss = joint_loss(graph, net, batch, u, v, objective);
    graph.backward(loss.root);
    step(net, opt);
    add_scaled(epoch, loss.breakdown, static_cast<double>(idx.size()) / static_cast<double>(ds.size()));
  }
  return epoch;
}

}  // namespace

TrainResult train(const Dataset& train_set, const Dataset* validation, const RunConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  validate(cfg);
  if (train_set.size() == 0) fail(ErrorKind::BadConfig, "training set is empty");

  TrainResult result{build(cfg.net, train_set.lesion_count(), train_set.location_count(),
                           derive_seed(cfg.seed, 0)),
                     {}, channel_mean(train_set), {}, {}, 0};
  check_compatible(result.net, train_set);
  if (validation) check_compatible(result.net, *validation);
  DualHeadNet& net = result.net;

  ObjectiveConfig objective = cfg.objective;
  SgdConfig sgd = cfg.optimizer;
  if (!objective.decoupled_reg) sgd.weight_decay = 0.0;  // the penalty lives in the graph
  Rng rng(derive_seed(cfg.seed, 1));

  if (cfg.pretrain_epochs > 0 && objective.mode != TaskMode::LesionOnly) {
    ObjectiveConfig warm = objective;
    warm.mode = TaskMode::LocationOnly;
    SgdState warm_opt = make_sgd_state(net, sgd);
    set_head_trainable(net, warm.mode);
    for (std::size_t e = 0; e < cfg.pretrain_epochs; ++e) {
      run_epoch(net, warm_opt, train_set, cfg, warm, result.channel_mean, rng);
    }
  }

  set_head_trainable(net, objective.mode);
  result.optimizer = make_sgd_state(net, sgd);
  result.best_net = net;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EpochLog log;
    log.epoch = e;
    log.lr = result.optimizer.base_lr;
    log.train = run_epoch(net, result.optimizer, train_set, cfg, objective, result.channel_mean, rng);
    double monitored = log.train.total;
    if (validation && validation->size() > 0) {
      const Predictions p = predict(net, *validation, cfg.data, result.channel_mean, cfg.ten_crop, objective);
      log.validation = p.loss;
      log.metrics = evaluate(p, *validation, objective.mode);
      monitored = p.loss.total;
    }
    if (monitored < best) {
      best = monitored;
      result.best_net = net;
      result.best_epoch = e;
    }
    plateau_update(result.optimizer, monitored);
    if (on_epoch) on_epoch(log);
    result.log.push_back(std::move(log));
  }
  for (auto& p : net.parameters()) p.trainable = true;
  for (auto& p : result.best_net.parameters()) p.trainable = true;
  return result;
}

TrainState train_state(const TrainResult& result, const AugmentConfig& aug, std::size_t epoch) {
  TrainState s = to_train_state(result.optimizer);
  s.epoch = static_cast<double>(epoch);
  s.eval_scale = static_cast<double>(aug.eval_scale);
  s.channel_mean = result.channel_mean;
  return s;
}

// ---------------------------------------------------------------------------
// cross-validation

namespace {

FoldResult run_fold(const Dataset& ds, const RunConfig& cfg, TaskMode mode, std::size_t fold) {
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i = 0; i < ds.size(); ++i) (ds.folds[i] == fold ? test_idx : train_idx).push_back(i);
  const Dataset train_set = subset(ds, train_idx);
  const Dataset test_set = subset(ds, test_idx);

  RunConfig fold_cfg = cfg;
  fold_cfg.seed = cfg.seed + fold;
  fold_cfg.objective.mode = mode;
  const TrainResult trained = train(train_set, nullptr, fold_cfg);
  const Predictions p = predict(trained.net, test_set, cfg.data, trained.channel_mean, cfg.ten_crop,
                                fold_cfg.objective);
  return FoldResult{fold, std::move(test_idx), evaluate(p, test_set, mode)};
}

MetricReport average(const std::vector<FoldResult>& folds, const Dataset& ds, TaskMode mode) {
  MetricReport m;
  m.lesion_names = ds.lesion_names;
  const double n = static_cast<double>(folds.size());
  if (mode != TaskMode::LocationOnly) {
    LesionMetrics l;
    l.class_ap.assign(ds.lesion_count(), std::nullopt);
    std::vector<std::size_t> counts(ds.lesion_count(), 0);
    std::vector<double> sums(ds.lesion_count(), 0.0);
    for (const auto& f : folds) {
      l.map_class += f.metrics.lesion->map_class / n;
      l.map_image += f.metrics.lesion->map_image / n;
      for (std::size_t c = 0; c < ds.lesion_count(); ++c) {
        if (f.metrics.lesion->class_ap[c]) {
          sums[c] += *f.metrics.lesion->class_ap[c];
          ++counts[c];
        }
      }
    }
    for (std::size_t c = 0; c < ds.lesion_count(); ++c) {
      if (counts[c]) {
        l.class_ap[c] = sums[c] / static_cast<double>(counts[c]);
      } else {
        l.excluded_classes.push_back(ds.lesion_names[c]);
      }
    }
    m.lesion = l;
  }
  if (mode != TaskMode::LesionOnly) {
    LocationMetrics loc;
    for (const auto& f : folds) {
      loc.top1 += f.metrics.location->top1 / n;
      loc.top3 += f.metrics.location->top3 / n;
    }
    m.location = loc;
  }
  return m;
}

}  // namespace

CvReport cross_validate(const Dataset& input, const RunConfig& cfg, TaskMode mode) {
  validate(cfg);
  Dataset ds = input;
  if (ds.folds.empty()) assign_folds(ds, cfg.folds, cfg.seed);
  const std::size_t fold_count = ds.fold_count ? ds.fold_count : cfg.folds;

  CvReport report;
  report.mode = mode;
  report.folds.resize(fold_count);
  if (cfg.threads <= 1) {
    for (std::size_t f = 0; f < fold_count; ++f) report.folds[f] = run_fold(ds, cfg, mode, f);
  } else {
    // Each fold writes only its own slot; aggregation below runs in fold order.
    std::vector<std::exception_ptr> errors(fold_count);
    for (std::size_t first = 0; first < fold_count; first += cfg.threads) {
      std::vector<std::jthread> workers;
      for (std::size_t f = first; f < std::min(fold_count, first + cfg.threads); ++f) {
        workers.emplace_back([&, f] {
          try {
            report.folds[f] = run_fold(ds, cfg, mode, f);
          } catch (...) {
            errors[f] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  report.mean = average(report.folds, ds, mode);
  return report;
}

json to_json(const CvReport& r) {
  json folds = json::array();
  for (const auto& f : r.folds) {
    json j = to_json(f.metrics);
    j["fold"] = f.fold;
    j["test_size"] = f.test_indices.size();
    folds.push_back(j);
  }
  return json{{"mode", to_string(r.mode)}, {"folds", folds}, {"mean", to_json(r.mean)}};
}

}  // namespace mtlk
