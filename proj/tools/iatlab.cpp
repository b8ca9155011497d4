// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

// iatlab command-line driver.
//
//   iatlab <command> [--config FILE] [--set key.path=value]... [--out DIR] [--jobs N]
//
// Commands: gen-data, pretrain, train, probe, sweep {lambda|id-head},
// export-features, report, calibrate. Every command resolves the config
// (defaults <- file <- --set), writes it to <out>/config.snapshot and then
// its outputs. Failures print one line
//   error: category=<kind> message=<text>
// on stderr and exit with a category-specific code.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iatlab/checkpoint.hpp"
#include "iatlab/diagnostics.hpp"
#include "iatlab/io.hpp"
#include "iatlab/mae.hpp"

namespace fs = std::filesystem;
using namespace iat;

namespace {

constexpr const char* kOutRootEnv = "IATLAB_OUT_ROOT";

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::io: return 3;
    case ErrorKind::data: return 4;
    case ErrorKind::numeric: return 5;
    case ErrorKind::checkpoint: return 6;
    case ErrorKind::dimension: return 7;
    case ErrorKind::contract: return 8;
  }
  return 1;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

// ---------------------------------------------------------------------------
// Run config

struct RunConfig {
  std::optional<std::uint64_t> seed;
  DatasetSpec data;
  MaeConfig pretrain;
  TrainConfig train;
  ProbeConfig probe;
  std::vector<double> sweep_values;  // empty: default grid of the sweep kind
  std::vector<std::uint64_t> sweep_seeds{1, 2, 3};
  int export_max_subjects = 0;
  std::vector<double> calibrate_strengths{0.05, 0.1, 0.15, 0.2, 0.3};
  double calibrate_band_lo = 0.6;
  double calibrate_band_hi = 0.9;
  std::string input_dataset;      // dataset dir; empty: generate from data
  std::string input_checkpoint;   // checkpoint file or run dir
  std::string input_init;         // backbone init checkpoint for train/sweep
  std::vector<std::string> report_runs;
};

Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed ? Json(*c.seed) : Json(nullptr);
  j["data"] = iat::to_json(c.data);
  j["pretrain"] = iat::to_json(c.pretrain);
  j["train"] = iat::to_json(c.train);
  j["probe"] = iat::to_json(c.probe);
  j["sweep"] = {{"values", c.sweep_values}, {"seeds", c.sweep_seeds}};
  j["export"] = {{"max_subjects", c.export_max_subjects}};
  j["calibrate"] = {{"strengths", c.calibrate_strengths},
                    {"band_lo", c.calibrate_band_lo},
                    {"band_hi", c.calibrate_band_hi}};
  j["inputs"] = {{"dataset", c.input_dataset}, {"checkpoint", c.input_checkpoint}, {"init", c.input_init}};
  j["report"] = {{"runs", c.report_runs}};
  return j;
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  StrictObject o(j, "config");
  if (const Json* s = o.child("seed"); s && !s->is_null()) {
    if (!s->is_number_unsigned()) throw ConfigError("config.seed: expected a non-negative integer");
    c.seed = s->get<std::uint64_t>();
  }
  if (const Json* d = o.child("data")) c.data = dataset_spec_from_json(*d, "data");
  if (const Json* p = o.child("pretrain")) c.pretrain = mae_config_from_json(*p, "pretrain");
  if (const Json* t = o.child("train")) c.train = train_config_from_json(*t, "train");
  if (const Json* p = o.child("probe")) c.probe = probe_config_from_json(*p, "probe");
  if (const Json* s = o.child("sweep")) {
    StrictObject os(*s, "sweep");
    os.read("values", c.sweep_values);
    os.read("seeds", c.sweep_seeds);
    os.finish();
  }
  if (const Json* e = o.child("export")) {
    StrictObject oe(*e, "export");
    oe.read("max_subjects", c.export_max_subjects);
    oe.finish();
  }
  if (const Json* k = o.child("calibrate")) {
    StrictObject ok(*k, "calibrate");
    ok.read("strengths", c.calibrate_strengths);
    ok.read("band_lo", c.calibrate_band_lo);
    ok.read("band_hi", c.calibrate_band_hi);
    ok.finish();
  }
  if (const Json* in = o.child("inputs")) {
    StrictObject oi(*in, "inputs");
    oi.read("dataset", c.input_dataset);
    oi.read("checkpoint", c.input_checkpoint);
    oi.read("init", c.input_init);
    oi.finish();
  }
  if (const Json* r = o.child("report")) {
    StrictObject orr(*r, "report");
    orr.read("runs", c.report_runs);
    orr.finish();
  }
  o.finish();
  if (c.seed) {
    c.train.seed = *c.seed;
    c.pretrain.seed = *c.seed;
  }
  // One architecture throughout: pretraining uses the training backbone.
  c.pretrain.backbone = c.train.backbone;
  return c;
}

// Applies "a.b.c=value"; value is parsed as JSON and otherwise taken as a
// string. The path must already exist in the resolved defaults.
void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json* node = &j;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("--set: unknown key '" + key + "'");
    node = &(*node)[part];
  }
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  *node = value;
}

Json read_json_file(const std::string& path) {
  if (!fs::exists(path)) throw IoError("config file '" + path + "' does not exist");
  try {
    return Json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "': " + one_line(e.what()));
  }
}

RunConfig resolve(const std::string& config_path, const std::vector<std::string>& overrides, Json& resolved) {
  resolved = to_json(RunConfig{});
  if (!config_path.empty()) {
    const Json user = read_json_file(config_path);
    if (!user.is_object()) throw ConfigError("config: expected an object at the top level");
    // Validate the user file on its own first so that unknown keys are
    // reported against the file rather than the merged tree.
    run_config_from_json(user);
    resolved.merge_patch(user);
  }
  for (const auto& o : overrides) apply_override(resolved, o);
  RunConfig cfg = run_config_from_json(resolved);
  resolved = to_json(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// Shared helpers

void write_snapshot(const fs::path& out, const Json& resolved) {
  fs::create_directories(out);
  write_text(out / "config.snapshot", resolved.dump(2) + "\n");
}

Dataset load_or_generate(const RunConfig& cfg) {
  if (!cfg.input_dataset.empty()) return load_dataset(cfg.input_dataset);
  return generate_dataset(cfg.data);
}

std::optional<ModelParams<float>> load_init(const RunConfig& cfg) {
  if (cfg.input_init.empty()) return std::nullopt;
  return load_checkpoint(cfg.input_init).params.subset({ParamGroup::backbone});
}

BackboneConfig backbone_of(const Checkpoint& ckpt, const BackboneConfig& fallback) {
  if (ckpt.metadata.contains("backbone")) return backbone_config_from_json(ckpt.metadata.at("backbone"), "checkpoint.backbone");
  return fallback;
}

std::string epoch_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%03d.ckpt", epoch);
  return buf;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(const RunConfig& cfg, const fs::path& out) {
  const Dataset ds = generate_dataset(cfg.data);
  save_dataset(ds, out);
  std::cout << "wrote " << ds.size() << " samples to " << out.string() << "\n";
}

void cmd_pretrain(const RunConfig& cfg, const fs::path& out) {
  const Dataset ds = load_or_generate(cfg);
  std::string metrics;
  const PretrainResult r = pretrain(cfg.pretrain, ds, [&](int epoch, double train_loss, double eval_loss) {
    Json j{{"epoch", epoch}, {"train_loss", train_loss}, {"eval_loss", eval_loss}};
    metrics += j.dump() + "\n";
    std::cout << "epoch " << epoch << " train " << fmt(train_loss) << " eval " << fmt(eval_loss) << "\n";
  });
  fs::create_directories(out / "checkpoints");
  Checkpoint ckpt;
  ckpt.metadata = {{"kind", "pretrain"}, {"backbone", iat::to_json(cfg.pretrain.backbone)}, {"epochs", cfg.pretrain.epochs}};
  ckpt.params = r.backbone;
  save_checkpoint(ckpt, out / "checkpoints" / "pretrain.ckpt");
  write_text(out / "metrics.jsonl", metrics);
  const double first = r.eval_loss.front();
  const double last = r.eval_loss.back();
  write_text(out / "summary.csv", "initial_eval_loss,final_eval_loss,relative_reduction\n" + fmt(first) + "," +
                                      fmt(last) + "," + fmt(first > 0.0 ? 1.0 - last / first : 0.0) + "\n");
}

void cmd_train(const RunConfig& cfg, const fs::path& out) {
  const Dataset ds = load_or_generate(cfg);
  const auto init = load_init(cfg);
  const FoldSplit split = split_subject_exclusive(ds, cfg.train.n_folds, cfg.train.split_seed);
  std::string metrics;
  const TrainResult r = train(cfg.train, ds, split, init ? &*init : nullptr, [&](const EpochMetrics& m) {
    metrics += iat::to_json(m.train).dump() + "\n" + iat::to_json(m.heldout).dump() + "\n";
    std::cout << "epoch " << m.train.epoch << " l_au " << fmt(m.train.l_au) << " l_id " << fmt(m.train.l_id)
              << " heldout_f1 " << fmt(m.heldout.macro_f1) << "\n";
  });
  fs::create_directories(out / "checkpoints");
  const Json backbone = iat::to_json(cfg.train.backbone);
  for (std::size_t e = 0; e < r.snapshots.size(); ++e) {
    Checkpoint snap;
    snap.metadata = {{"kind", "snapshot"}, {"backbone", backbone}, {"epoch", e + 1}};
    snap.params = r.snapshots[e];
    save_checkpoint(snap, out / "checkpoints" / epoch_name(static_cast<int>(e) + 1));
  }
  Checkpoint final_ckpt;
  final_ckpt.metadata = {{"kind", "train"}, {"backbone", backbone}, {"config", iat::to_json(cfg.train)},
                         {"train_subjects", r.train_subjects}};
  final_ckpt.params = r.final_params;
  save_checkpoint(final_ckpt, out / "checkpoints" / "final.ckpt");
  write_text(out / "metrics.jsonl", metrics);
  if (r.convergence.warning) std::cerr << "warning: fewer epochs than the convergence patience\n";
  write_text(out / "summary.csv",
             "lambda,iat_enabled,id_head_depth,seed,convergence_epoch,converged_f1,peak_f1,converged_id_loss,"
             "convergence_warning\n" +
                 fmt(cfg.train.lambda) + "," + (cfg.train.iat_enabled ? "1" : "0") + "," +
                 std::to_string(cfg.train.id_head_depth) + "," + std::to_string(cfg.train.seed) + "," +
                 std::to_string(r.convergence_epoch()) + "," + fmt(r.converged_f1()) + "," + fmt(r.peak_f1()) + "," +
                 fmt(r.converged_id_loss()) + "," + (r.convergence.warning ? "1" : "0") + "\n");
}

void cmd_probe(const RunConfig& cfg, const fs::path& out) {
  if (cfg.input_checkpoint.empty()) throw ConfigError("probe needs inputs.checkpoint (a checkpoint file or run dir)");
  const Dataset ds = load_or_generate(cfg);
  const fs::path in = cfg.input_checkpoint;
  std::vector<ProbeResult> results;
  if (fs::is_directory(in)) {
    // Run directory: one probe per epoch snapshot.
    const fs::path dir = in / "checkpoints";
    if (!fs::is_directory(dir)) throw IoError("'" + in.string() + "' has no checkpoints/ directory");
    std::vector<std::optional<ModelParams<float>>> snaps;
    BackboneConfig bb = cfg.train.backbone;
    for (int e = 1;; ++e) {
      const fs::path p = dir / epoch_name(e);
      if (!fs::exists(p)) break;
      Checkpoint c = load_checkpoint(p);
      bb = backbone_of(c, bb);
      snaps.emplace_back(std::move(c.params));
    }
    if (snaps.empty()) throw IoError("no epoch checkpoints in '" + dir.string() + "'");
    results = probe_curve(snaps, bb, ds, cfg.probe);
  } else {
    const Checkpoint c = load_checkpoint(in);
    const ProbeSplit split = probe_split(ds, cfg.probe.train_per_subject, cfg.probe.test_per_subject, cfg.probe.seed);
    ProbeResult r = linear_probe(c.params, backbone_of(c, cfg.train.backbone), ds, split, cfg.probe);
    r.epoch = c.metadata.value("epoch", 0);
    results.push_back(r);
  }
  for (const auto& r : results) std::cout << "epoch " << r.epoch << " accuracy " << fmt(r.accuracy) << "\n";
  write_text(out / "probe.csv", probe_csv(results));
}

void cmd_sweep(const RunConfig& cfg, SweepKind kind, int jobs, const fs::path& out) {
  const Dataset ds = load_or_generate(cfg);
  const auto init = load_init(cfg);
  const std::vector<double>& values =
      cfg.sweep_values.empty() ? (kind == SweepKind::lambda ? default_lambda_grid() : default_depth_grid())
                               : cfg.sweep_values;
  TrainConfig base = cfg.train;
  base.keep_snapshots = false;
  const SweepTable table = run_sweep(base, kind, values, cfg.sweep_seeds, ds, jobs, init ? &*init : nullptr);
  write_text(out / "sweep.csv", sweep_csv(table));
  write_text(out / "runs.jsonl", sweep_runs_jsonl(table));
  const std::string rendered = render_sweep_table(table);
  write_text(out / "table.txt", rendered);
  std::cout << rendered;
  for (const auto& run : table.runs) {
    if (!run.ok) std::cerr << "warning: run value=" << run.value << " seed=" << run.seed << " failed: " << run.error << "\n";
  }
}

void cmd_export_features(const RunConfig& cfg, const fs::path& out) {
  if (cfg.input_checkpoint.empty()) throw ConfigError("export-features needs inputs.checkpoint");
  const Dataset ds = load_or_generate(cfg);
  const Checkpoint c = load_checkpoint(cfg.input_checkpoint);
  write_text(out / "features.csv",
             export_features_csv(c.params, backbone_of(c, cfg.train.backbone), ds, cfg.export_max_subjects));
}

// Reads a two-line CSV (header + one row) into a key -> text map.
std::map<std::string, std::string> read_summary(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  std::map<std::string, std::string> out;
  std::stringstream hs(header), rs(row);
  std::string k, v;
  while (std::getline(hs, k, ',') && std::getline(rs, v, ',')) out[k] = v;
  return out;
}

void cmd_report(const RunConfig& cfg, const std::vector<std::string>& runs, const fs::path& out) {
  std::vector<std::string> dirs = runs.empty() ? cfg.report_runs : runs;
  if (dirs.empty()) throw ConfigError("report needs at least one run directory");
  std::string text;
  std::string curves = "run,epoch,split,l_au,l_id,macro_f1\n";
  for (const auto& d : dirs) {
    const fs::path dir = d;
    if (!fs::is_directory(dir)) throw IoError("run directory '" + d + "' does not exist");
    text += "== " + d + "\n";
    if (fs::exists(dir / "table.txt")) text += read_text(dir / "table.txt");
    if (fs::exists(dir / "summary.csv")) {
      for (const auto& [k, v] : read_summary(dir / "summary.csv")) text += "  " + k + " = " + v + "\n";
    }
    if (fs::exists(dir / "metrics.jsonl")) {
      std::istringstream in(read_text(dir / "metrics.jsonl"));
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const Json j = Json::parse(line);
        if (!j.contains("split")) continue;
        curves += d + "," + std::to_string(j.at("epoch").get<int>()) + "," + j.at("split").get<std::string>() + "," +
                  fmt(j.at("l_au").get<double>()) + "," + fmt(j.at("l_id").get<double>()) + "," +
                  fmt(j.at("macro_f1").get<double>()) + "\n";
      }
    }
    if (fs::exists(dir / "probe.csv")) text += read_text(dir / "probe.csv");
  }
  write_text(out / "report.txt", text);
  write_text(out / "curves.csv", curves);
  std::cout << text;
}

void cmd_calibrate(const RunConfig& cfg, const fs::path& out) {
  const CalibrationResult r = calibrate_benchmark(cfg.data, cfg.calibrate_strengths, cfg.train, cfg.probe,
                                                  cfg.calibrate_band_lo, cfg.calibrate_band_hi);
  write_text(out / "calibration.csv", calibration_csv(r));
  write_text(out / "data.json", iat::to_json(r.spec).dump(2) + "\n");
  if (!r.in_band) std::cerr << "warning: no strength reached the target band; kept the nearest\n";
  std::cout << "selected identity_signature_strength " << fmt(r.spec.identity_signature_strength) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"iatlab: identity-adversarial AU training on a synthetic benchmark"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  int jobs = 1;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config,-c", config_path, "JSON run config");
    sub->add_option("--set", overrides, "override key.path=value (repeatable)");
    sub->add_option("--out,-o", out_dir, std::string("output directory (default: $") + kOutRootEnv + "/<command>)");
  };
  auto* gen = app.add_subcommand("gen-data", "generate and save the synthetic dataset");
  auto* pre = app.add_subcommand("pretrain", "masked-autoencoder pretraining");
  auto* trn = app.add_subcommand("train", "joint AU + identity-adversarial training");
  auto* prb = app.add_subcommand("probe", "linear identity probe on a checkpoint or run dir");
  auto* swp = app.add_subcommand("sweep", "lambda or id-head depth sweep");
  auto* exp = app.add_subcommand("export-features", "write pooled features as CSV");
  auto* rep = app.add_subcommand("report", "collect run directories into tables");
  auto* cal = app.add_subcommand("calibrate", "search the identity signature strength");
  for (auto* s : {gen, pre, trn, prb, swp, exp, rep, cal}) common(s);
  std::string sweep_kind;
  swp->add_option("kind", sweep_kind, "lambda | id-head")->required()->check(CLI::IsMember({"lambda", "id-head"}));
  swp->add_option("--jobs,-j", jobs, "parallel runs")->check(CLI::PositiveNumber);
  std::vector<std::string> report_runs;
  rep->add_option("runs", report_runs, "run directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: category=config message=" << one_line(e.what()) << "\n";
    return exit_code(ErrorKind::config);
  }

  try {
    Json resolved;
    const RunConfig cfg = resolve(config_path, overrides, resolved);
    CLI::App* sub = app.get_subcommands().front();
    fs::path out = out_dir;
    if (out.empty()) {
      const char* root = std::getenv(kOutRootEnv);
      out = fs::path(root != nullptr && *root != '\0' ? root : "runs") / sub->get_name();
    }
    write_snapshot(out, resolved);
    if (sub == gen) cmd_gen_data(cfg, out);
    else if (sub == pre) cmd_pretrain(cfg, out);
    else if (sub == trn) cmd_train(cfg, out);
    else if (sub == prb) cmd_probe(cfg, out);
    else if (sub == swp) cmd_sweep(cfg, sweep_kind == "lambda" ? SweepKind::lambda : SweepKind::id_head, jobs, out);
    else if (sub == exp) cmd_export_features(cfg, out);
    else if (sub == rep) cmd_report(cfg, report_runs, out);
    else if (sub == cal) cmd_calibrate(cfg, out);
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: category=" << to_string(e.kind()) << " message=" << one_line(e.what()) << "\n";
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: category=data message=" << one_line(e.what()) << "\n";
    return exit_code(ErrorKind::data);
  } catch (const std::exception& e) {
    std::cerr << "error: category=internal message=" << one_line(e.what()) << "\n";
    return 1;
  }
}
