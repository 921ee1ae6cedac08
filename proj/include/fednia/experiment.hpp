#pragma once

// Experiment harness: data preparation, the round loop, and every artifact a
// run leaves behind.
//
// Run directory layout:
//   config.json      resolved config (malicious ids filled in)
//   manifest.json    seed, schema/format versions, build id, client roles
//   partition.json   client id -> sample indices into the loaded training set
//   metrics.jsonl    one record per round; byte-identical for a fixed config
//   timings.jsonl    wall-clock per round (kept apart so metrics stay reproducible)
//   report.csv       long format: method,dataset,attack,delta,round,metric,value
//   checkpoint_final.bin
//   profiles/round_NNNN.bin   only with eval.dump_profiles

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fednia/config.hpp"
#include "fednia/eval.hpp"
#include "fednia/serialize.hpp"
#include "fednia/synth.hpp"

#ifndef FEDNIA_BUILD_ID
#define FEDNIA_BUILD_ID "unknown"
#endif

namespace fednia {

inline constexpr const char* kVersion = "1.0.0";

struct RunOptions {
  std::size_t threads = 1;
  bool quiet = true;
  bool record_timings = true;
};

struct PreparedData {
  LabeledDataset train;
  LabeledDataset test;
};

/// Loads (or synthesises) the data, shuffles the training set with the master
/// seed and applies the size limits.
inline PreparedData prepare_data(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  PreparedData p;
  if (d.source == DatasetConfig::Source::Idx) {
    for (const auto& f : {d.train_images, d.train_labels, d.test_images, d.test_labels})
      require(std::filesystem::exists(f), ErrorKind::Io, "dataset file not found: " + f);
    p.train = load_idx(d.train_images, d.train_labels, d.num_classes);
    p.test = load_idx(d.test_images, d.test_labels, d.num_classes);
  } else {
    p.train = synth::make_digits(d.synthetic_train, derive_seed(d.synthetic_seed, "train"));
    p.test = synth::make_digits(d.synthetic_test, derive_seed(d.synthetic_seed, "test"));
  }
  const auto order = permutation(p.train.size(), derive_seed(c.seed, "dataset-shuffle"));
  std::vector<std::size_t> keep(order.begin(),
                                order.begin() + static_cast<std::ptrdiff_t>(d.train_limit ? std::min(d.train_limit, order.size())
                                                                                          : order.size()));
  p.train = subset(p.train, keep);
  if (d.test_limit && d.test_limit < p.test.size()) p.test = head(p.test, d.test_limit);
  p.train.validate();
  p.test.validate();
  return p;
}

namespace detail {

inline nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json metrics_record(const RoundReport& r) {
  using nlohmann::json;
  json j;
  j["round"] = r.round;
  j["loss"] = r.train_loss;
  j["test_loss"] = opt(r.test_loss);
  j["accuracy"] = opt(r.accuracy);
  j["targeted_accuracy"] = opt(r.targeted_accuracy);
  j["asr"] = opt(r.asr);
  if (r.defended) {
    j["tau"] = r.tau;
    j["sigma"] = r.sigma;
    j["mean_error"] = r.mean_error;
    json errs = json::array();
    for (auto [id, e] : r.errors) errs.push_back({{"client", id}, {"e", e}});
    j["errors"] = errs;
    j["detector_loss"] = r.detector_final_loss;
    j["fallback"] = to_string(r.fallback);
  } else {
    j["tau"] = nullptr;
    j["sigma"] = nullptr;
    j["mean_error"] = nullptr;
    j["errors"] = json::array();
    j["detector_loss"] = nullptr;
    j["fallback"] = nullptr;
  }
  j["filtered_ids"] = r.rejected;
  j["survivors"] = r.survivors;
  j["detection_precision"] = opt(r.detection_precision);
  j["detection_recall"] = opt(r.detection_recall);
  j["precision_undefined"] = r.precision_undefined;
  return j;
}

inline std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

struct ExperimentSummary {
  std::filesystem::path run_dir;
  std::vector<RoundReport> rounds;
  WeightSet final_weights;
  double final_accuracy = 0.0;
  std::optional<double> final_asr;
  std::optional<double> final_targeted_accuracy;
  double mean_round_ms = 0.0;
};

inline constexpr const char* kReportHeader = "method,dataset,attack,delta,round,metric,value";

/// Executes every round and writes the run directory.
inline ExperimentSummary run_experiment(ExperimentConfig cfg, const RunOptions& opts = {}) {
  namespace fs = std::filesystem;
  resolve_malicious_ids(cfg);
  auto& fed = cfg.federation;
  fed.seed = cfg.seed;
  fed.validate();

  const fs::path dir = cfg.output_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::Io, "cannot create output directory " + dir.string() + ": " + ec.message());

  const auto data = prepare_data(cfg);
  const std::size_t N = fed.total_clients();
  for (const auto& a : cfg.attacks) a.spec.validate(data.train.num_classes, data.train.image_rows, data.train.image_cols);

  PartitionPlan plan{N, derive_seed(cfg.seed, "partition-plan"), cfg.dataset.scheme, cfg.dataset.classes_per_client};
  auto part_idx = partition_indices(data.train, plan);
  std::vector<LabeledDataset> locals;
  for (const auto& idx : part_idx) locals.push_back(subset(data.train, idx));

  // Per-client attack specs with seeds fanned out from the master seed.
  std::vector<std::optional<AttackSpec>> role(N);
  for (const auto& a : cfg.attacks)
    for (std::size_t id : a.clients) {
      AttackSpec s = a.spec;
      s.seed = derive_seed(cfg.seed, "attack", {id, a.spec.seed});
      role[id] = s;
    }

  std::optional<int> watched_class;
  std::optional<LabeledDataset> triggered;
  for (const auto& a : cfg.attacks) {
    if (!watched_class) watched_class = a.spec.attacked_class();
    if (a.spec.kind == AttackKind::Backdoor && !triggered) triggered = make_triggered_testset(data.test, a.spec);
  }

  const auto specs = classifier_specs(data.train.features(), cfg.hidden, static_cast<std::size_t>(data.train.num_classes));
  WeightSet global = init_weights(specs, derive_seed(cfg.seed, "model-init"));

  std::optional<DefenseFn> defense;
  if (cfg.defense) defense = fednia_defense(*cfg.defense, derive_seed(cfg.seed, "defense"), opts.threads);

  // Static artifacts.
  {
    std::ofstream(dir / "config.json") << to_json(cfg).dump(2) << "\n";
    nlohmann::json man = {{"version", kVersion},
                          {"build_id", FEDNIA_BUILD_ID},
                          {"schema_version", kConfigSchemaVersion},
                          {"weights_format_version", kWeightsFormatVersion},
                          {"seed", cfg.seed},
                          {"method", cfg.method_name()},
                          {"dataset", cfg.dataset.name},
                          {"attack", cfg.attack_name()},
                          {"delta", fed.delta()},
                          {"train_samples", data.train.size()},
                          {"test_samples", data.test.size()}};
    nlohmann::json mal = nlohmann::json::array();
    for (std::size_t id = 0; id < N; ++id)
      if (role[id]) mal.push_back(id);
    man["malicious_ids"] = mal;
    std::ofstream(dir / "manifest.json") << man.dump(2) << "\n";
  }
  auto write_partition = [&](const std::vector<std::vector<std::size_t>>& idx, std::optional<std::size_t> round) {
    nlohmann::json pj = nlohmann::json::object();
    for (std::size_t c = 0; c < idx.size(); ++c) pj[std::to_string(c)] = idx[c];
    const auto name = round ? "partition_round_" + std::to_string(*round) + ".json" : std::string("partition.json");
    std::ofstream(dir / name) << pj.dump() << "\n";
  };
  write_partition(part_idx, std::nullopt);

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  std::ofstream timings;
  if (opts.record_timings) timings.open(dir / "timings.jsonl", std::ios::trunc);
  require(static_cast<bool>(metrics), ErrorKind::Io, "cannot write " + (dir / "metrics.jsonl").string());
  std::ostringstream csv;
  csv << kReportHeader << "\n";
  const std::string row_prefix = cfg.method_name() + "," + cfg.dataset.name + "," + cfg.attack_name() + "," +
                                 detail::csv_number(fed.delta()) + ",";
  auto csv_row = [&](std::size_t round, const char* metric, double v) {
    csv << row_prefix << round << "," << metric << "," << detail::csv_number(v) << "\n";
  };

  ExperimentSummary summary;
  summary.run_dir = dir;
  double total_ms = 0.0;

  for (std::size_t t = 0; t < fed.rounds; ++t) {
    if (cfg.dataset.repartition_each_round && t > 0) {
      plan.seed = derive_seed(cfg.seed, "partition-plan", {t});
      part_idx = partition_indices(data.train, plan);
      locals.clear();
      for (const auto& idx : part_idx) locals.push_back(subset(data.train, idx));
      write_partition(part_idx, t);
    }
    std::vector<Client> clients;
    for (std::size_t id = 0; id < N; ++id) clients.push_back({id, &locals[id], role[id]});

    auto res = run_round(global, t, clients, fed, cfg.aggregator, defense ? &*defense : nullptr, opts.threads);
    global = std::move(res.global);
    auto& rep = res.report;

    if (rep.defended) {
      const auto q = detection_quality(rep);
      rep.detection_precision = q.precision;
      rep.detection_recall = q.recall;
      rep.precision_undefined = q.precision_undefined;
    }
    const bool eval_round = (t + 1) % cfg.eval.every == 0 || t + 1 == fed.rounds;
    if (eval_round) {
      rep.accuracy = accuracy(global, data.test);
      rep.test_loss = mean_cross_entropy(global, data.test);
      if (watched_class) rep.targeted_accuracy = targeted_accuracy(global, data.test, *watched_class);
      if (triggered && triggered->size() > 0) rep.asr = attack_success_rate(global, *triggered);
    }

    if (cfg.eval.dump_profiles && !res.profiles.empty()) {
      fs::create_directories(dir / "profiles");
      nlohmann::json labels = nlohmann::json::array({"global"});
      for (std::size_t id = 0; id < N; ++id) labels.push_back(id);
      std::ostringstream name;
      name << "round_" << std::setw(4) << std::setfill('0') << t << ".bin";
      write_file_bytes(dir / "profiles" / name.str(), encode_profiles(res.profiles, labels));
    }

    metrics << detail::metrics_record(rep).dump() << "\n";
    metrics.flush();
    if (opts.record_timings) timings << nlohmann::json{{"round", t}, {"wall_ms", rep.wall_ms}}.dump() << "\n";
    total_ms += rep.wall_ms;

    csv_row(t, "train_loss", rep.train_loss);
    if (rep.accuracy) csv_row(t, "accuracy", *rep.accuracy);
    if (rep.targeted_accuracy) csv_row(t, "targeted_accuracy", *rep.targeted_accuracy);
    if (rep.asr) csv_row(t, "asr", *rep.asr);
    if (rep.detection_recall) csv_row(t, "detection_recall", *rep.detection_recall);
    if (rep.detection_precision) csv_row(t, "detection_precision", *rep.detection_precision);

    if (!opts.quiet) {
      std::fprintf(stderr, "[%s] round %zu/%zu loss %.4f", cfg.method_name().c_str(), t + 1, fed.rounds, rep.train_loss);
      if (rep.accuracy) std::fprintf(stderr, " acc %.4f", *rep.accuracy);
      if (rep.asr) std::fprintf(stderr, " asr %.4f", *rep.asr);
      if (rep.defended) std::fprintf(stderr, " rejected %zu", rep.rejected.size());
      std::fprintf(stderr, " (%.0f ms)\n", rep.wall_ms);
    }
    summary.rounds.push_back(std::move(rep));
  }

  const auto& last = summary.rounds.back();
  summary.final_accuracy = last.accuracy.value_or(0.0);
  summary.final_asr = last.asr;
  summary.final_targeted_accuracy = last.targeted_accuracy;
  summary.mean_round_ms = total_ms / static_cast<double>(fed.rounds);
  // Ranked score: ASR-driven experiments are scored as 1 - ASR.
  csv_row(last.round, "score", last.asr ? asr_to_accuracy(*last.asr) : summary.final_accuracy);

  {
    std::ofstream out(dir / "report.csv", std::ios::trunc);
    out << csv.str();
  }
  save_weights(dir / "checkpoint_final.bin", global, cfg.seed);
  summary.final_weights = std::move(global);
  return summary;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { Delta, Lambda, Aggregator };

struct SweepPoint {
  std::string label;
  ExperimentConfig config;
};

/// Expands one axis into per-value configs, each writing under root/label.
inline std::vector<SweepPoint> expand_sweep(const ExperimentConfig& base, SweepAxis axis,
                                            const std::vector<std::string>& values) {
  require(!values.empty(), ErrorKind::Config, "sweep axis has no values");
  std::vector<SweepPoint> out;
  const std::filesystem::path root = base.output_dir;
  for (const auto& v : values) {
    ExperimentConfig c = base;
    std::string label;
    switch (axis) {
      case SweepAxis::Delta: {
        double delta = 0.0;
        try {
          delta = std::stod(v);
        } catch (const std::exception&) {
          fail(ErrorKind::Config, "delta value '" + v + "' is not a number");
        }
        require(delta >= 0.0 && delta < 0.5, ErrorKind::Config, "delta must lie in [0, 0.5), got " + v);
        const std::size_t N = base.federation.total_clients();
        const auto r = static_cast<std::size_t>(std::llround(delta * static_cast<double>(N)));
        c.federation.num_malicious = r;
        c.federation.num_benign = N - r;
        if (r > 0) {
          require(!base.attacks.empty(), ErrorKind::Config, "delta sweep needs an attack entry in the base config");
          c.attacks = {AttackAssignment{{}, base.attacks.front().spec}};
        } else {
          c.attacks.clear();
        }
        c.federation.validate();
        label = "delta_" + v;
        break;
      }
      case SweepAxis::Lambda: {
        require(base.defense.has_value(), ErrorKind::Config, "lambda sweep needs a defense section");
        try {
          c.defense->lambda = std::stod(v);
        } catch (const std::exception&) {
          fail(ErrorKind::Config, "lambda value '" + v + "' is not a number");
        }
        c.defense->validate();
        label = "lambda_" + v;
        break;
      }
      case SweepAxis::Aggregator: {
        if (v == "fednia") {
          c.aggregator = AggregatorSpec{};
          if (!c.defense) c.defense = DefenseParams{};
        } else {
          c.defense.reset();
          c.aggregator.kind = aggregator_kind_from_string(v);
        }
        c.method = v;
        label = "method_" + v;
        break;
      }
    }
    c.output_dir = (root / label).string();
    out.push_back({label, std::move(c)});
  }
  return out;
}

/// Runs each point and concatenates the per-run report.csv files.
inline std::vector<ExperimentSummary> run_sweep(const ExperimentConfig& base, SweepAxis axis,
                                                const std::vector<std::string>& values, const RunOptions& opts = {}) {
  const auto points = expand_sweep(base, axis, values);
  std::vector<ExperimentSummary> out;
  std::filesystem::create_directories(base.output_dir);
  std::ofstream combined(std::filesystem::path(base.output_dir) / "report.csv", std::ios::trunc);
  combined << kReportHeader << "\n";
  for (const auto& p : points) {
    out.push_back(run_experiment(p.config, opts));
    std::ifstream in(out.back().run_dir / "report.csv");
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) combined << line << "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Post-hoc analysis over report.csv files

struct ReportRow {
  std::string method, dataset, attack, delta;
  std::size_t round = 0;
  std::string metric;
  double value = 0.0;
};

inline std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::Analysis, path.string() + ": empty report");
  require(line == kReportHeader, ErrorKind::Analysis,
          path.string() + ": unexpected header");
  std::vector<ReportRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    require(f.size() == 7, ErrorKind::Analysis, path.string() + ":" + std::to_string(lineno) + ": expected 7 columns");
    try {
      rows.push_back({f[0], f[1], f[2], f[3], std::stoul(f[4]), f[5], std::stod(f[6])});
    } catch (const std::exception&) {
      fail(ErrorKind::Analysis, path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

/// Final "score" per (dataset, attack, delta) x method. Every experiment must
/// have every method.
inline ResultMatrix build_result_matrix(const std::vector<ReportRow>& rows) {
  std::map<std::string, std::map<std::string, std::pair<std::size_t, double>>> cell;  // exp -> method -> (round, v)
  std::set<std::string> methods;
  for (const auto& r : rows) {
    if (r.metric != "score") continue;
    const std::string exp = r.dataset + "|" + r.attack + "|" + r.delta;
    methods.insert(r.method);
    auto& slot = cell[exp][r.method];
    if (r.round >= slot.first) slot = {r.round, r.value};
  }
  ResultMatrix m;
  m.methods.assign(methods.begin(), methods.end());
  for (const auto& [exp, by_method] : cell) {
    std::vector<double> row;
    for (const auto& meth : m.methods) {
      const auto it = by_method.find(meth);
      require(it != by_method.end(), ErrorKind::Analysis, "experiment " + exp + " has no result for method " + meth);
      row.push_back(it->second.second);
    }
    m.experiments.push_back(exp);
    m.values.push_back(std::move(row));
  }
  return m;
}

struct AnalysisOutput {
  ResultMatrix matrix;
  FriedmanResult friedman;
};

inline AnalysisOutput analyze_reports(const std::vector<std::filesystem::path>& reports, double alpha,
                                      const std::filesystem::path& out_dir) {
  std::vector<ReportRow> rows;
  for (const auto& p : reports) {
    auto r = read_report_csv(p);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  AnalysisOutput out{build_result_matrix(rows), {}};
  require(out.matrix.methods.size() >= 2, ErrorKind::Analysis, "need at least two methods to rank");
  out.friedman = friedman_test(out.matrix, alpha);

  std::filesystem::create_directories(out_dir);
  std::ofstream ranks(out_dir / "ranks.csv", std::ios::trunc);
  ranks << "experiment,method,value,rank\n";
  for (std::size_t e = 0; e < out.matrix.experiments.size(); ++e) {
    const auto rr = rank_row(out.matrix.values[e]);
    for (std::size_t j = 0; j < out.matrix.methods.size(); ++j)
      ranks << out.matrix.experiments[e] << "," << out.matrix.methods[j] << ","
            << detail::csv_number(out.matrix.values[e][j]) << "," << detail::csv_number(rr[j]) << "\n";
  }
  for (std::size_t j = 0; j < out.matrix.methods.size(); ++j)
    ranks << "average," << out.matrix.methods[j] << ",," << detail::csv_number(out.friedman.avg_ranks[j]) << "\n";

  nlohmann::json fj;
  fj["alpha"] = alpha;
  fj["statistic"] = out.friedman.statistic;
  fj["critical_difference"] = out.friedman.critical_difference;
  fj["experiments"] = out.matrix.experiments.size();
  nlohmann::json avg = nlohmann::json::object();
  for (std::size_t j = 0; j < out.matrix.methods.size(); ++j) avg[out.matrix.methods[j]] = out.friedman.avg_ranks[j];
  fj["average_ranks"] = avg;
  fj["groups"] = out.friedman.groups;
  std::ofstream(out_dir / "friedman.json") << fj.dump(2) << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Poison audit

/// JSON diff between a dataset and its poisoned version.
inline nlohmann::json poison_audit(const LabeledDataset& before, const LabeledDataset& after) {
  require(before.size() == after.size() && before.features() == after.features(), ErrorKind::Spec,
          "attack changed the dataset shape");
  std::size_t rows_changed = 0, labels_changed = 0, pixels_changed = 0;
  std::vector<std::size_t> hist(10, 0);  // |delta| in (0, 0.1], ..., (0.9, 1.0]
  std::map<std::string, std::size_t> transitions;
  for (std::size_t i = 0; i < before.size(); ++i) {
    bool row_diff = false;
    for (std::size_t j = 0; j < before.features(); ++j) {
      const float a = before.samples(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      const float b = after.samples(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (a == b) continue;
      row_diff = true;
      ++pixels_changed;
      const double d = std::abs(static_cast<double>(b) - static_cast<double>(a));
      const auto bin = std::min<std::size_t>(9, static_cast<std::size_t>(std::ceil(d * 10.0 - 1e-12)) - (d > 0 ? 1 : 0));
      ++hist[bin];
    }
    rows_changed += row_diff || before.labels[i] != after.labels[i];
    if (before.labels[i] != after.labels[i]) {
      ++labels_changed;
      ++transitions[std::to_string(before.labels[i]) + "->" + std::to_string(after.labels[i])];
    }
  }
  nlohmann::json h = nlohmann::json::array();
  for (std::size_t b = 0; b < hist.size(); ++b)
    h.push_back({{"lo", b / 10.0}, {"hi", (b + 1) / 10.0}, {"count", hist[b]}});
  return {{"samples", before.size()},         {"rows_changed", rows_changed},
          {"labels_changed", labels_changed}, {"pixels_changed", pixels_changed},
          {"pixel_change_histogram", h},      {"label_transitions", transitions},
          {"class_counts_before", class_counts(before)}, {"class_counts_after", class_counts(after)}};
}

}  // namespace fednia
