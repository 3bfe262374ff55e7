#include "mtlk/commands.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mtlk/analysis.hpp"
#include "mtlk/error.hpp"
#include "mtlk/eval.hpp"

namespace mtlk {

using nlohmann::json;

namespace {

json read_json_file(const fs::path& path, ErrorKind kind) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(kind, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << text;
}

struct LoadedModel {
  Checkpoint ck;
  AugmentConfig aug;
};

LoadedModel load_model(const fs::path& checkpoint) {
  LoadedModel m{load_checkpoint(checkpoint), {}};
  const std::size_t crop = m.ck.net.config().input_size;
  const auto scale = static_cast<std::size_t>(m.ck.state.eval_scale);
  m.aug.crop = crop;
  m.aug.eval_scale = std::max(scale, crop);
  m.aug.jitter_min = m.aug.jitter_max = m.aug.eval_scale;
  m.aug.flip_prob = 0.0;
  return m;
}

void check_dims(const DualHeadNet& net, const Dataset& ds) {
  if (net.lesion_count() != ds.lesion_count() || net.location_count() != ds.location_count()) {
    fail(ErrorKind::DimensionMismatch,
         "checkpoint has " + std::to_string(net.lesion_count()) + "x" + std::to_string(net.location_count()) +
             " classes, manifest has " + std::to_string(ds.lesion_count()) + "x" +
             std::to_string(ds.location_count()));
  }
}

MetricReport report_from_scores(const std::optional<ScoreMatrix>& lesion,
                                const std::optional<ScoreMatrix>& location, const Dataset& ds) {
  MetricReport r;
  r.lesion_names = ds.lesion_names;
  const auto ids = ds.ids();
  if (lesion) {
    const ScoreMatrix s = align_rows(*lesion, ids);
    if (s.cols != ds.lesion_count()) fail(ErrorKind::DimensionMismatch, "lesion score columns differ from manifest");
    r.lesion = lesion_metrics(s, ds.lesion_matrix());
  }
  if (location) {
    const ScoreMatrix s = align_rows(*location, ids);
    if (s.cols != ds.location_count()) fail(ErrorKind::DimensionMismatch, "location score columns differ from manifest");
    r.location = location_metrics(s, ds.locations());
  }
  return r;
}

}  // namespace

void cmd_synth(const fs::path& spec_file, const fs::path& out_dir, std::optional<std::uint64_t> seed) {
  json j = read_json_file(spec_file, ErrorKind::BadSpec);
  if (seed) j["seed"] = *seed;
  const SynthSpec spec = synth_spec_from_json(j);
  write_dataset(synthesize(spec), out_dir);
  write_text(out_dir / "synth_spec.json", to_json(spec).dump(2) + "\n");
}

RunConfig apply(RunConfig cfg, const TrainOverrides& o) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.mode) cfg.objective.mode = parse_task_mode(*o.mode);
  if (o.manifest) cfg.manifest = *o.manifest;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.lr) cfg.optimizer.lr = *o.lr;
  if (o.threads) cfg.threads = *o.threads;
  validate(cfg);
  return cfg;
}

json cmd_train(const RunConfig& cfg) {
  if (cfg.manifest.empty()) fail(ErrorKind::BadConfig, "no manifest given");
  if (cfg.out_dir.empty()) fail(ErrorKind::BadConfig, "no out_dir given");
  Dataset ds = load_manifest(cfg.manifest);
  validate(ds);

  Dataset train_set = ds;
  std::optional<Dataset> val_set;
  if (cfg.validation_fold) {
    assign_folds(ds, cfg.folds, cfg.seed);
    const auto held = fold_members(ds, *cfg.validation_fold);
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.folds[i] != *cfg.validation_fold) rest.push_back(i);
    }
    train_set = subset(ds, rest);
    val_set = subset(ds, held);
  }

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");

  std::ofstream log(out / "train_log.jsonl", std::ios::binary);
  if (!log) fail(ErrorKind::IoError, "cannot write training log");
  TrainResult result = train(train_set, val_set ? &*val_set : nullptr, cfg, [&](const EpochLog& e) {
    log << to_json(e, cfg.objective.mode).dump() << '\n';
    log.flush();
  });

  TrainState init_state;
  {
    // the initial net is rebuilt from the same seed rather than kept around
    RunConfig c = cfg;
    const DualHeadNet init = build(c.net, ds.lesion_count(), ds.location_count(), derive_seed(cfg.seed, 0));
    TrainState s = to_train_state(make_sgd_state(init, cfg.optimizer));
    s.eval_scale = static_cast<double>(cfg.data.eval_scale);
    s.channel_mean = result.channel_mean;
    save_checkpoint(out / "init.mtlk", init, s);
  }
  save_checkpoint(out / "final.mtlk", result.net, train_state(result, cfg.data, cfg.epochs));
  TrainState best = train_state(result, cfg.data, result.best_epoch + 1);
  best.velocity.clear();
  save_checkpoint(out / "best.mtlk", cfg.epochs ? result.best_net : result.net, best);

  json summary{{"epochs", cfg.epochs}, {"best_epoch", result.best_epoch}, {"out_dir", cfg.out_dir}};
  if (!result.log.empty()) summary["last"] = to_json(result.log.back(), cfg.objective.mode);
  return summary;
}

json cmd_eval(const fs::path& checkpoint, const fs::path& manifest, const EvalOptions& opt) {
  const LoadedModel m = load_model(checkpoint);
  const Dataset ds = load_manifest(manifest);
  validate(ds);
  check_dims(m.ck.net, ds);
  ObjectiveConfig objective;
  objective.mode = opt.mode;
  const Predictions p = predict(m.ck.net, ds, m.aug, m.ck.state.channel_mean, opt.ten_crop, objective);
  if (opt.scores_out) {
    fs::create_directories(*opt.scores_out);
    if (opt.mode != TaskMode::LocationOnly) write_scores_csv(*opt.scores_out / "lesion_scores.csv", p.lesion);
    if (opt.mode != TaskMode::LesionOnly) write_scores_csv(*opt.scores_out / "location_scores.csv", p.location);
  }
  return to_json(evaluate(p, ds, opt.mode));
}

json cmd_metrics(const std::optional<fs::path>& lesion_scores, const std::optional<fs::path>& location_scores,
                 const fs::path& manifest) {
  const Dataset ds = load_manifest(manifest);
  validate(ds);
  std::optional<ScoreMatrix> les, loc;
  if (lesion_scores) les = read_scores_csv(*lesion_scores, ScoreKind::Lesion);
  if (location_scores) loc = read_scores_csv(*location_scores, ScoreKind::Location);
  return to_json(report_from_scores(les, loc, ds));
}

json cmd_ensemble(const fs::path& scores_a, const fs::path& scores_b, const fs::path& manifest, ScoreKind kind,
                  bool mean, const std::optional<fs::path>& scores_out) {
  const Dataset ds = load_manifest(manifest);
  validate(ds);
  const auto ids = ds.ids();
  const ScoreMatrix a = align_rows(read_scores_csv(scores_a, kind), ids);
  const ScoreMatrix b = align_rows(read_scores_csv(scores_b, kind), ids);
  if (a.class_names != b.class_names) fail(ErrorKind::MatrixMismatch, "score files have different class columns");
  const ScoreMatrix e = mean ? ensemble_mean(a, b) : ensemble_max(a, b);
  if (scores_out) write_scores_csv(*scores_out, e);
  std::optional<ScoreMatrix> les, loc;
  (kind == ScoreKind::Lesion ? les : loc) = e;
  return to_json(report_from_scores(les, loc, ds));
}

json cmd_cv(const RunConfig& cfg) {
  if (cfg.manifest.empty()) fail(ErrorKind::BadConfig, "no manifest given");
  const Dataset ds = load_manifest(cfg.manifest);
  validate(ds);
  json report = to_json(cross_validate(ds, cfg, cfg.objective.mode));
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    write_text(fs::path(cfg.out_dir) / "cv_report.json", report.dump(2) + "\n");
  }
  return report;
}

std::string cmd_correlate(const fs::path& manifest) {
  const Dataset ds = load_manifest(manifest);
  validate(ds);
  return correlation_csv(correlation_matrix(ds), ds);
}

json cmd_retrieve(const fs::path& checkpoint, const fs::path& index_manifest, const fs::path& query_manifest,
                  std::size_t k) {
  const LoadedModel m = load_model(checkpoint);
  const Dataset index_ds = load_manifest(index_manifest);
  const Dataset query_ds = load_manifest(query_manifest);
  check_dims(m.ck.net, index_ds);
  const FeatureIndex index = build_index(m.ck.net, index_ds, m.aug, m.ck.state.channel_mean);
  const FeatureIndex queries = build_index(m.ck.net, query_ds, m.aug, m.ck.state.channel_mean);
  return to_json(retrieval_report(index, queries, k));
}

json cmd_attention(const fs::path& checkpoint, const fs::path& manifest, const fs::path& out_dir,
                   const AttentionOptions& opt) {
  const LoadedModel m = load_model(checkpoint);
  const Dataset ds = load_manifest(manifest);
  validate(ds);
  check_dims(m.ck.net, ds);
  fs::create_directories(out_dir);
  json written = json::array();
  for (const auto& s : ds.samples) {
    if (!opt.ids.empty() && std::find(opt.ids.begin(), opt.ids.end(), s.id) == opt.ids.end()) continue;
    std::size_t cls = 0;
    if (opt.class_index) {
      cls = *opt.class_index;
    } else if (opt.head == Head::Lesion) {
      cls = static_cast<std::size_t>(std::find(s.lesions.begin(), s.lesions.end(), 1) - s.lesions.begin());
    } else {
      cls = static_cast<std::size_t>(s.location - 1);
    }
    const Tensor view = center_view(s, m.aug, m.ck.state.channel_mean);
    const AttentionMap map = attention(m.ck.net, view, opt.head, cls, opt.upsample);
    const auto& names = opt.head == Head::Lesion ? ds.lesion_names : ds.location_names;
    const std::string stem = s.id + "_" + to_string(opt.head);
    write_pnm(out_dir / (stem + ".pgm"),
              map.upsampled ? *map.upsampled : Tensor(Shape{1, map.height, map.width}, map.values));
    json side = attention_sidecar(map, s.id, cls < names.size() ? names[cls] : std::to_string(cls));
    write_text(out_dir / (stem + ".json"), side.dump(2) + "\n");
    written.push_back(side);
  }
  return json{{"maps", written}};
}

// ---------------------------------------------------------------------------
// command line

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-task lesion / body-location toolkit"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Override the random seed");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic correlated-label dataset");
  std::string spec_file, synth_out;
  synth->add_option("spec", spec_file, "Synthesis spec (JSON)")->required();
  synth->add_option("out_dir", synth_out, "Output directory")->required();
  synth->add_option("--seed", seed, "Override the spec seed");

  // train / cv share overrides
  TrainOverrides ov;
  std::string config_file;
  auto add_overrides = [&](CLI::App* cmd) {
    cmd->add_option("config", config_file, "Run configuration (JSON)")->required();
    cmd->add_option("--seed", ov.seed, "Override seed");
    cmd->add_option("--epochs", ov.epochs, "Override epochs");
    cmd->add_option("--mode", ov.mode, "mtl | lesion_only | location_only");
    cmd->add_option("--manifest", ov.manifest, "Override manifest path");
    cmd->add_option("--out", ov.out_dir, "Override output directory");
    cmd->add_option("--lr", ov.lr, "Override base learning rate");
    cmd->add_option("--threads", ov.threads, "Folds trained concurrently (cv)");
  };
  auto* train_cmd = app.add_subcommand("train", "Train a dual-head net");
  add_overrides(train_cmd);
  auto* cv_cmd = app.add_subcommand("cv", "Run k-fold cross-validation");
  add_overrides(cv_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score a manifest with a checkpoint");
  std::string ckpt, manifest, scores_out, mode_text = "mtl";
  bool ten_crop = false;
  eval_cmd->add_option("checkpoint", ckpt)->required();
  eval_cmd->add_option("manifest", manifest)->required();
  eval_cmd->add_flag("--ten-crop", ten_crop, "Average activations over 10 crops");
  eval_cmd->add_option("--scores-out", scores_out, "Directory for score CSVs");
  eval_cmd->add_option("--mode", mode_text, "Which heads to report");

  // metrics
  auto* metrics_cmd = app.add_subcommand("metrics", "Metrics from score CSVs");
  std::string lesion_csv, location_csv;
  metrics_cmd->add_option("manifest", manifest)->required();
  metrics_cmd->add_option("--lesion", lesion_csv, "Lesion score CSV");
  metrics_cmd->add_option("--location", location_csv, "Location score CSV");

  // ensemble
  auto* ens_cmd = app.add_subcommand("ensemble", "Element-wise max of two score files");
  std::string scores_a, scores_b, kind_text = "lesion", ens_out;
  bool use_mean = false;
  ens_cmd->add_option("scores_a", scores_a)->required();
  ens_cmd->add_option("scores_b", scores_b)->required();
  ens_cmd->add_option("manifest", manifest)->required();
  ens_cmd->add_option("--kind", kind_text, "lesion | location");
  ens_cmd->add_flag("--mean", use_mean, "Arithmetic mean instead of max");
  ens_cmd->add_option("--scores-out", ens_out, "Write the combined scores");

  // correlate
  auto* corr_cmd = app.add_subcommand("correlate", "Lesion/location correlation matrix as CSV");
  std::string corr_out;
  corr_cmd->add_option("manifest", manifest)->required();
  corr_cmd->add_option("--out", corr_out, "Write CSV here instead of stdout");

  // retrieve
  auto* ret_cmd = app.add_subcommand("retrieve", "Nearest neighbours in pooled-feature space");
  std::string query_manifest;
  std::size_t k = 5;
  ret_cmd->add_option("checkpoint", ckpt)->required();
  ret_cmd->add_option("index_manifest", manifest)->required();
  ret_cmd->add_option("query_manifest", query_manifest)->required();
  ret_cmd->add_option("-k", k, "Neighbours per query");

  // attention
  auto* att_cmd = app.add_subcommand("attention", "Export class activation maps");
  std::string att_out, head_text = "lesion";
  std::optional<std::size_t> class_index;
  std::vector<std::string> ids;
  att_cmd->add_option("checkpoint", ckpt)->required();
  att_cmd->add_option("manifest", manifest)->required();
  att_cmd->add_option("out_dir", att_out)->required();
  att_cmd->add_option("--head", head_text, "lesion | location");
  att_cmd->add_option("--class", class_index, "Class index (default: ground truth)");
  att_cmd->add_option("--id", ids, "Restrict to these image ids");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: Usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth) {
      cmd_synth(spec_file, synth_out, seed);
    } else if (*train_cmd || *cv_cmd) {
      if (!ov.seed) ov.seed = seed;
      const RunConfig cfg = apply(load_run_config(config_file), ov);
      out << (*train_cmd ? cmd_train(cfg) : cmd_cv(cfg)).dump(2) << '\n';
    } else if (*eval_cmd) {
      EvalOptions opt;
      opt.ten_crop = ten_crop;
      opt.mode = parse_task_mode(mode_text);
      if (!scores_out.empty()) opt.scores_out = scores_out;
      out << cmd_eval(ckpt, manifest, opt).dump(2) << '\n';
    } else if (*metrics_cmd) {
      std::optional<fs::path> les, loc;
      if (!lesion_csv.empty()) les = lesion_csv;
      if (!location_csv.empty()) loc = location_csv;
      out << cmd_metrics(les, loc, manifest).dump(2) << '\n';
    } else if (*ens_cmd) {
      if (kind_text != "lesion" && kind_text != "location") fail(ErrorKind::BadConfig, "--kind must be lesion or location");
      std::optional<fs::path> dst;
      if (!ens_out.empty()) dst = ens_out;
      out << cmd_ensemble(scores_a, scores_b, manifest,
                          kind_text == "lesion" ? ScoreKind::Lesion : ScoreKind::Location, use_mean, dst)
                 .dump(2)
          << '\n';
    } else if (*corr_cmd) {
      const std::string csv = cmd_correlate(manifest);
      if (corr_out.empty()) {
        out << csv;
      } else {
        write_text(corr_out, csv);
      }
    } else if (*ret_cmd) {
      out << cmd_retrieve(ckpt, manifest, query_manifest, k).dump(2) << '\n';
    } else if (*att_cmd) {
      AttentionOptions opt;
      if (head_text != "lesion" && head_text != "location") fail(ErrorKind::BadConfig, "--head must be lesion or location");
      opt.head = head_text == "lesion" ? Head::Lesion : Head::Location;
      opt.class_index = class_index;
      opt.ids = ids;
      out << cmd_attention(ckpt, manifest, att_out, opt).dump(2) << '\n';
    }
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << to_string(e.kind()) << ": " << msg << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: Internal: " << msg << '\n';
    return 1;
  }
  return 0;
}

}  // namespace mtlk
