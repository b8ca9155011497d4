// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/diagnostics.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>

namespace iat {

namespace {
constexpr std::uint64_t kProbeShuffleStream = 30;
constexpr std::uint64_t kProbeLabelStream = 31;

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double se_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}
}  // namespace

Tensor<float> extract_features(const ModelParams<float>& params, const BackboneConfig& cfg, const Dataset& dataset,
                               std::span<const Index> rows, Index batch_size) {
  if (rows.empty()) throw ContractError("extract_features: no rows");
  Tensor<float> out({static_cast<Index>(rows.size()), cfg.embed_dim});
  for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(rows.size(), start + static_cast<std::size_t>(batch_size));
    Tape<float> tape(false);
    Bound<float> p(tape, params);
    const Var<float> f = backbone_forward(p, cfg, tape.constant(dataset.images_at(rows.subspan(start, end - start))));
    if (f.dim(1) != cfg.embed_dim) throw CheckpointError("feature dimension does not match the backbone config");
    std::copy(f.value().values().begin(), f.value().values().end(),
              out.data() + static_cast<std::ptrdiff_t>(start) * cfg.embed_dim);
  }
  return out;
}

void ProbeConfig::validate() const {
  if (!(lr > 0.0) || !(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("probe lr/momentum out of range");
  if (max_epochs < 1 || patience < 1 || !(rel_tol >= 0.0)) throw ConfigError("probe stopping rule is invalid");
  if (batch_size < 1) throw ConfigError("probe.batch_size must be >= 1");
  if (train_per_subject < 1 || test_per_subject < 1) throw ConfigError("probe split sizes must be >= 1");
}

Json to_json(const ProbeConfig& c) {
  Json j;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["rel_tol"] = c.rel_tol;
  j["batch_size"] = c.batch_size;
  j["train_per_subject"] = c.train_per_subject;
  j["test_per_subject"] = c.test_per_subject;
  j["seed"] = c.seed;
  return j;
}

ProbeConfig probe_config_from_json(const Json& j, const std::string& path) {
  ProbeConfig c;
  StrictObject o(j, path);
  o.read("lr", c.lr);
  o.read("momentum", c.momentum);
  o.read("max_epochs", c.max_epochs);
  o.read("patience", c.patience);
  o.read("rel_tol", c.rel_tol);
  o.read("batch_size", c.batch_size);
  o.read("train_per_subject", c.train_per_subject);
  o.read("test_per_subject", c.test_per_subject);
  o.read("seed", c.seed);
  o.finish();
  return c;
}

ProbeResult linear_probe(const ModelParams<float>& params, const BackboneConfig& cfg, const Dataset& dataset,
                         const ProbeSplit& split, const ProbeConfig& probe, bool shuffle_labels) {
  probe.validate();
  const Index n_classes = dataset.spec.n_subjects;
  const Index dim = cfg.embed_dim;
  const Tensor<double> train_x = extract_features(params, cfg, dataset, split.train).cast<double>();
  Tensor<double> test_x = extract_features(params, cfg, dataset, split.test).cast<double>();

  std::vector<int> train_y, test_y;
  for (Index r : split.train) train_y.push_back(dataset.subject_ids[static_cast<std::size_t>(r)]);
  for (Index r : split.test) test_y.push_back(dataset.subject_ids[static_cast<std::size_t>(r)]);
  if (shuffle_labels) {
    Rng label_rng(probe.seed, {kProbeLabelStream});
    label_rng.shuffle(train_y);
    label_rng.shuffle(test_y);
  }

  // Standardize with probe-train statistics.
  const auto n_train = train_x.dim(0);
  Eigen::RowVectorXd mu = train_x.matrix().colwise().mean();
  Eigen::RowVectorXd sd =
      ((train_x.matrix().rowwise() - mu).array().square().colwise().sum() / static_cast<double>(n_train)).sqrt();
  for (Index k = 0; k < dim; ++k) sd[k] = sd[k] > 1e-12 ? sd[k] : 1.0;
  Tensor<double> xs = train_x;
  xs.matrix() = ((train_x.matrix().rowwise() - mu).array().rowwise() / sd.array()).matrix();
  test_x.matrix() = ((test_x.matrix().rowwise() - mu).array().rowwise() / sd.array()).matrix();

  ModelParams<double> head;
  head.add("id_head.0.w", Tensor<double>({dim, n_classes}), true);
  head.add("id_head.0.b", Tensor<double>({n_classes}), false);
  SgdMomentum<double> opt({probe.lr, probe.momentum});

  ProbeResult result;
  result.chance = 1.0 / static_cast<double>(n_classes);
  std::vector<double> best_so_far;
  std::vector<Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < probe.max_epochs; ++epoch) {
    Rng shuffle_rng(probe.seed, {kProbeShuffleStream, static_cast<std::uint64_t>(epoch)});
    shuffle_rng.shuffle(order);
    double sum = 0.0;
    for (Index start = 0; start < n_train; start += probe.batch_size) {
      const Index end = std::min(n_train, start + probe.batch_size);
      Tensor<double> xb({end - start, dim});
      std::vector<int> yb;
      for (Index i = start; i < end; ++i) {
        const Index r = order[static_cast<std::size_t>(i)];
        xb.matrix().row(i - start) = xs.matrix().row(r);
        yb.push_back(train_y[static_cast<std::size_t>(r)]);
      }
      Tape<double> tape;
      Bound<double> p(tape, head);
      const Var<double> loss = cross_entropy(linear(p, "id_head.0", tape.constant(xb)), yb);
      opt.step(head, backward(loss, p.trainable()));
      sum += loss.value()[0] * static_cast<double>(end - start);
    }
    const double epoch_loss = sum / static_cast<double>(n_train);
    result.train_loss = epoch_loss;
    result.probe_epochs = epoch + 1;
    best_so_far.push_back(best_so_far.empty() ? epoch_loss : std::min(best_so_far.back(), epoch_loss));
    const auto e = best_so_far.size() - 1;
    if (e >= static_cast<std::size_t>(probe.patience)) {
      const double past = best_so_far[e - static_cast<std::size_t>(probe.patience)];
      if (past - best_so_far[e] < probe.rel_tol * std::abs(past)) break;
    }
  }

  const Eigen::MatrixXd logits =
      (test_x.matrix() * head.at("id_head.0.w").matrix()).rowwise() + head.at("id_head.0.b").matrix().row(0);
  Index correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    correct += arg == test_y[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(logits.rows());
  return result;
}

std::vector<ProbeResult> probe_curve(std::span<const std::optional<ModelParams<float>>> snapshots,
                                     const BackboneConfig& cfg, const Dataset& dataset, const ProbeConfig& probe) {
  const ProbeSplit split = probe_split(dataset, probe.train_per_subject, probe.test_per_subject, probe.seed);
  std::vector<ProbeResult> out;
  for (std::size_t e = 0; e < snapshots.size(); ++e) {
    if (!snapshots[e]) continue;
    ProbeResult r = linear_probe(*snapshots[e], cfg, dataset, split, probe);
    r.epoch = static_cast<int>(e) + 1;
    out.push_back(r);
  }
  return out;
}

std::string probe_csv(std::span<const ProbeResult> results) {
  std::string s = "epoch,accuracy,chance,probe_epochs,train_loss\n";
  for (const auto& r : results) {
    s += std::to_string(r.epoch) + "," + fmt(r.accuracy) + "," + fmt(r.chance) + "," + std::to_string(r.probe_epochs) +
         "," + fmt(r.train_loss) + "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Sweeps

const std::vector<double>& default_lambda_grid() {
  static const std::vector<double> grid{0.0, 0.02, 0.2, 1.0, 2.0, 3.0};
  return grid;
}

const std::vector<double>& default_depth_grid() {
  static const std::vector<double> grid{1.0, 2.0, 3.0};
  return grid;
}

SweepTable run_sweep(const TrainConfig& base, SweepKind kind, std::span<const double> values,
                     std::span<const std::uint64_t> seeds, const Dataset& dataset, int jobs,
                     const ModelParams<float>* init_backbone) {
  if (values.empty() || seeds.empty()) throw ConfigError("sweep needs at least one value and one seed");
  const FoldSplit split = split_subject_exclusive(dataset, base.n_folds, base.split_seed);
  SweepTable table;
  table.kind = kind;
  table.runs.resize(values.size() * seeds.size());
  for (std::size_t v = 0; v < values.size(); ++v)
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      auto& run = table.runs[v * seeds.size() + s];
      run.value = values[v];
      run.seed = seeds[s];
    }

  auto execute = [&](SweepRun& run) {
    TrainConfig cfg = base;
    cfg.seed = run.seed;
    cfg.keep_snapshots = false;
    cfg.iat_enabled = true;
    if (kind == SweepKind::lambda) {
      cfg.lambda = run.value;
    } else {
      cfg.id_head_depth = static_cast<int>(std::lround(run.value));
      if (static_cast<double>(cfg.id_head_depth) != run.value) {
        run.error = "depth must be an integer";
        return;
      }
    }
    try {
      const TrainResult r = train(cfg, dataset, split, init_backbone);
      run.ok = true;
      run.converged_f1 = r.converged_f1();
      run.peak_f1 = r.peak_f1();
      run.convergence_epoch = r.convergence_epoch();
      run.convergence_warning = r.convergence.warning;
      run.converged_id_loss = r.converged_id_loss();
      run.heldout_f1 = r.heldout_f1();
      for (const auto& e : r.epochs) run.train_id_loss.push_back(e.train.l_id);
    } catch (const Error& e) {
      run.error = std::string(to_string(e.kind())) + ": " + e.what();
    }
  };

  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(table.runs.size())));
  if (workers == 1) {
    for (auto& run : table.runs) execute(run);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < table.runs.size(); i = next++) execute(table.runs[i]);
      });
    }
    for (auto& t : pool) t.join();
  }

  for (std::size_t v = 0; v < values.size(); ++v) {
    SweepRow row;
    row.value = values[v];
    std::vector<double> f1, peak, epoch, id_loss;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& run = table.runs[v * seeds.size() + s];
      if (!run.ok) {
        row.complete = false;
        continue;
      }
      f1.push_back(run.converged_f1);
      peak.push_back(run.peak_f1);
      epoch.push_back(run.convergence_epoch);
      id_loss.push_back(run.converged_id_loss);
    }
    row.n_runs = static_cast<int>(f1.size());
    row.mean_f1 = mean_of(f1);
    row.se_f1 = se_of(f1);
    row.mean_peak_f1 = mean_of(peak);
    row.mean_convergence_epoch = mean_of(epoch);
    row.mean_id_loss = mean_of(id_loss);
    table.rows.push_back(row);
  }
  return table;
}

std::string sweep_csv(const SweepTable& table) {
  const bool depth = table.kind == SweepKind::id_head;
  std::string s = depth ? "depth" : "lambda";
  s += ",n_runs,complete,mean_f1,se_f1,mean_peak_f1,mean_convergence_epoch";
  if (depth) s += ",mean_id_loss";
  s += "\n";
  for (const auto& r : table.rows) {
    s += fmt(r.value) + "," + std::to_string(r.n_runs) + "," + (r.complete ? "1" : "0") + "," + fmt(r.mean_f1) + "," +
         fmt(r.se_f1) + "," + fmt(r.mean_peak_f1) + "," + fmt(r.mean_convergence_epoch);
    if (depth) s += "," + fmt(r.mean_id_loss);
    s += "\n";
  }
  return s;
}

std::string sweep_runs_jsonl(const SweepTable& table) {
  std::string s;
  for (const auto& r : table.runs) {
    Json j;
    j[table.kind == SweepKind::id_head ? "depth" : "lambda"] = r.value;
    j["seed"] = r.seed;
    j["ok"] = r.ok;
    if (!r.ok) j["error"] = r.error;
    j["converged_f1"] = r.converged_f1;
    j["peak_f1"] = r.peak_f1;
    j["convergence_epoch"] = r.convergence_epoch;
    j["convergence_warning"] = r.convergence_warning;
    j["converged_id_loss"] = r.converged_id_loss;
    j["heldout_f1"] = r.heldout_f1;
    j["train_id_loss"] = r.train_id_loss;
    s += j.dump() + "\n";
  }
  return s;
}

std::string render_sweep_table(const SweepTable& table) {
  const bool depth = table.kind == SweepKind::id_head;
  std::vector<std::vector<std::string>> cells;
  cells.push_back({depth ? "depth" : "lambda", "runs", "F1 (conv)", "+/- se", "F1 (peak)", "conv. epoch"});
  if (depth) cells.front().push_back("ID loss");
  for (const auto& r : table.rows) {
    std::vector<std::string> line{fmt(r.value), std::to_string(r.n_runs) + (r.complete ? "" : "*"),
                                  fixed(100.0 * r.mean_f1, 2), fixed(100.0 * r.se_f1, 2),
                                  fixed(100.0 * r.mean_peak_f1, 2), fixed(r.mean_convergence_epoch, 1)};
    if (depth) line.push_back(fixed(r.mean_id_loss, 4));
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      if (c > 0) s += "  ";
      s += std::string(width[c] - cells[i][c].size(), ' ') + cells[i][c];
    }
    s += "\n";
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      s += std::string(total + 2 * (width.size() - 1), '-') + "\n";
    }
  }
  bool incomplete = false;
  for (const auto& r : table.rows) incomplete = incomplete || !r.complete;
  if (incomplete) s += "* row has failed runs\n";
  return s;
}

// ---------------------------------------------------------------------------
// Export

std::string export_features_csv(const ModelParams<float>& params, const BackboneConfig& cfg, const Dataset& dataset,
                                int max_subjects) {
  std::vector<Index> rows;
  for (Index r = 0; r < dataset.size(); ++r) {
    if (max_subjects <= 0 || dataset.subject_ids[static_cast<std::size_t>(r)] < max_subjects) rows.push_back(r);
  }
  const Tensor<float> f = extract_features(params, cfg, dataset, rows);
  std::string s = "subject_id";
  for (Index a = 0; a < dataset.n_au(); ++a) s += ",au_" + std::to_string(a + 1);
  for (Index k = 0; k < cfg.embed_dim; ++k) s += ",f_" + std::to_string(k + 1);
  s += "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<std::size_t>(rows[i]);
    s += std::to_string(dataset.subject_ids[r]);
    for (Index a = 0; a < dataset.n_au(); ++a) {
      s += dataset.au_labels[r * static_cast<std::size_t>(dataset.n_au()) + static_cast<std::size_t>(a)] ? ",1" : ",0";
    }
    for (Index k = 0; k < cfg.embed_dim; ++k) s += "," + fmt(static_cast<double>(f[static_cast<Index>(i) * cfg.embed_dim + k]));
    s += "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Calibration

CalibrationResult calibrate_benchmark(const DatasetSpec& base, std::span<const double> strengths,
                                      const TrainConfig& train_cfg, const ProbeConfig& probe, double band_lo,
                                      double band_hi) {
  if (strengths.empty()) throw ConfigError("calibration needs at least one strength");
  if (!(band_lo <= band_hi)) throw ConfigError("calibration band is empty");
  CalibrationResult result;
  double best_distance = 0.0;
  double best_centre = 0.0;
  const double centre = 0.5 * (band_lo + band_hi);
  for (double strength : strengths) {
    DatasetSpec spec = base;
    spec.identity_signature_strength = strength;
    const Dataset ds = generate_dataset(spec);
    TrainConfig cfg = train_cfg;
    cfg.iat_enabled = false;
    cfg.keep_snapshots = false;
    const TrainResult run = train(cfg, ds, split_subject_exclusive(ds, cfg.n_folds, cfg.split_seed));
    const ProbeSplit ps = probe_split(ds, probe.train_per_subject, probe.test_per_subject, probe.seed);
    const ProbeResult pr = linear_probe(run.final_params, cfg.backbone, ds, ps, probe);
    result.trace.push_back({strength, pr.accuracy, run.converged_f1()});
    const double distance = std::max({0.0, band_lo - pr.accuracy, pr.accuracy - band_hi});
    const double from_centre = std::abs(pr.accuracy - centre);
    if (result.trace.size() == 1 || distance < best_distance ||
        (distance == best_distance && from_centre < best_centre)) {
      best_distance = distance;
      best_centre = from_centre;
      result.spec = spec;
    }
  }
  result.in_band = best_distance == 0.0;
  return result;
}

std::string calibration_csv(const CalibrationResult& result) {
  std::string s = "strength,probe_accuracy,heldout_f1,selected\n";
  for (const auto& p : result.trace) {
    s += fmt(p.strength) + "," + fmt(p.accuracy) + "," + fmt(p.heldout_f1) + "," +
         (p.strength == result.spec.identity_signature_strength ? "1" : "0") + "\n";
  }
  return s;
}

}  // namespace iat
