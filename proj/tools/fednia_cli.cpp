// fednia command-line driver: run, sweep, analyze, poison-audit, validate,
// make-dataset.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#if __has_include(<CLI/CLI.hpp>)
#include <CLI/CLI.hpp>
#else
#include <CLI11.hpp>
#endif

#include "fednia/fednia.hpp"

namespace fs = std::filesystem;
using namespace fednia;

namespace {

// Exit codes. 1 is left for unexpected failures, 2 for usage errors.
int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return 3;
    case ErrorKind::Spec: return 4;
    case ErrorKind::Io: return 5;
    case ErrorKind::Format: return 6;
    case ErrorKind::Shape: return 7;
    case ErrorKind::Input: return 8;
    case ErrorKind::Divergence: return 9;
    case ErrorKind::Aggregation: return 10;
    case ErrorKind::Evaluation: return 11;
    case ErrorKind::Analysis: return 12;
    case ErrorKind::Defense: return 13;
  }
  return 1;
}

constexpr int kUsageExit = 2;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::string output_dir;
  bool dry_run = false;
  bool verbose = false;
  bool dump_profiles = false;
};

ExperimentConfig load_with_overrides(const std::string& path, const Globals& g) {
  auto cfg = load_config(path);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.output_dir.empty()) cfg.output_dir = g.output_dir;
  if (g.dump_profiles) cfg.eval.dump_profiles = true;
  return cfg;
}

RunOptions run_options(const Globals& g) {
  RunOptions o;
  o.threads = g.threads;
  o.quiet = !g.verbose;
  return o;
}

void print_resolved(ExperimentConfig cfg) {
  resolve_malicious_ids(cfg);
  std::cout << to_json(cfg).dump(2) << "\n";
}

int cmd_run(const std::string& config, const Globals& g) {
  auto cfg = load_with_overrides(config, g);
  if (g.dry_run) {
    print_resolved(cfg);
    return 0;
  }
  const auto s = run_experiment(cfg, run_options(g));
  std::printf("run dir: %s\nfinal accuracy: %.4f\n", s.run_dir.string().c_str(), s.final_accuracy);
  if (s.final_asr) std::printf("final asr: %.4f\n", *s.final_asr);
  if (s.final_targeted_accuracy) std::printf("final targeted accuracy: %.4f\n", *s.final_targeted_accuracy);
  std::printf("mean round time: %.1f ms\n", s.mean_round_ms);
  return 0;
}

int cmd_sweep(const std::string& config, SweepAxis axis, const std::vector<std::string>& values, const Globals& g) {
  auto cfg = load_with_overrides(config, g);
  if (g.dry_run) {
    for (const auto& p : expand_sweep(cfg, axis, values)) {
      std::cout << "# " << p.label << "\n";
      print_resolved(p.config);
    }
    return 0;
  }
  for (const auto& s : run_sweep(cfg, axis, values, run_options(g))) {
    std::printf("%s: accuracy %.4f", s.run_dir.string().c_str(), s.final_accuracy);
    if (s.final_asr) std::printf(" asr %.4f", *s.final_asr);
    std::printf("\n");
  }
  std::printf("combined report: %s\n", (fs::path(cfg.output_dir) / "report.csv").string().c_str());
  return 0;
}

int cmd_analyze(const std::vector<std::string>& reports, double alpha, const Globals& g) {
  std::vector<fs::path> paths(reports.begin(), reports.end());
  const fs::path out = g.output_dir.empty() ? fs::path("analysis") : fs::path(g.output_dir);
  const auto res = analyze_reports(paths, alpha, out);
  std::printf("Friedman statistic %.6f, CD %.6f (alpha %.2f, %zu experiments)\n", res.friedman.statistic,
              res.friedman.critical_difference, alpha, res.matrix.experiments.size());
  for (std::size_t j = 0; j < res.matrix.methods.size(); ++j)
    std::printf("  %-16s %.4f\n", res.matrix.methods[j].c_str(), res.friedman.avg_ranks[j]);
  std::printf("wrote %s and %s\n", (out / "ranks.csv").string().c_str(), (out / "friedman.json").string().c_str());
  return 0;
}

int cmd_poison_audit(const std::string& images, const std::string& labels, const std::string& attack_path,
                     std::size_t limit, const Globals& g) {
  std::ifstream in(attack_path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open attack spec " + attack_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, attack_path + ": " + e.what());
  }
  auto spec = attack_spec_from_json(j);
  if (g.seed) spec.seed = *g.seed;
  auto ds = load_idx(images, labels);
  if (limit > 0 && limit < ds.size()) ds = head(ds, limit);
  spec.validate(ds.num_classes, ds.image_rows, ds.image_cols);
  if (g.dry_run) {
    std::cout << attack_spec_to_json(spec).dump(2) << "\n";
    return 0;
  }
  const auto report = poison_audit(ds, apply_attack(ds, spec)).dump(2);
  if (g.output_dir.empty()) {
    std::cout << report << "\n";
  } else {
    fs::create_directories(g.output_dir);
    std::ofstream(fs::path(g.output_dir) / "poison_audit.json") << report << "\n";
  }
  return 0;
}

int cmd_validate(const std::string& config, const Globals& g) {
  auto cfg = load_with_overrides(config, g);
  resolve_malicious_ids(cfg);
  cfg.federation.validate();
  std::printf("%s: ok (method %s, %zu clients, %zu malicious, %zu rounds)\n", config.c_str(),
              cfg.method_name().c_str(), cfg.federation.total_clients(), cfg.federation.num_malicious,
              cfg.federation.rounds);
  if (g.dry_run) print_resolved(cfg);
  return 0;
}

int cmd_make_dataset(std::size_t train, std::size_t test, const Globals& g) {
  const fs::path out = g.output_dir.empty() ? fs::path("data") : fs::path(g.output_dir);
  const std::uint64_t seed = g.seed.value_or(1);
  if (g.dry_run) {
    std::printf("would write %zu train / %zu test digits (seed %llu) to %s\n", train, test,
                static_cast<unsigned long long>(seed), out.string().c_str());
    return 0;
  }
  fs::create_directories(out);
  const auto tr = synth::make_digits(train, derive_seed(seed, "train"));
  const auto te = synth::make_digits(test, derive_seed(seed, "test"));
  save_idx(tr, out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte");
  save_idx(te, out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte");
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with noise-induced activation filtering"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion) + " (" + FEDNIA_BUILD_ID + ")");

  Globals g;
  app.add_option("--seed", g.seed, "Override the master seed");
  app.add_option("--threads", g.threads, "Worker threads for client training and probing")->check(CLI::PositiveNumber);
  app.add_option("--output-dir", g.output_dir, "Override the output directory");
  app.add_flag("--dry-run", g.dry_run, "Validate and print the resolved configuration without running");
  app.add_flag("-v,--verbose", g.verbose, "Per-round progress on stderr");

  std::string config;
  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("config", config, "Experiment config (JSON)")->required();
  run->add_flag("--dump-profiles", g.dump_profiles, "Write averaged activation profiles per round");

  std::vector<std::string> deltas, lambdas, aggregators;
  auto* sweep = app.add_subcommand("sweep", "Run one experiment per value of a single axis");
  sweep->add_option("config", config, "Base experiment config (JSON)")->required();
  auto* o_delta = sweep->add_option("--delta", deltas, "Malicious fractions, e.g. 0.02,0.1,0.2")->delimiter(',');
  auto* o_lambda = sweep->add_option("--lambda", lambdas, "Threshold scales")->delimiter(',');
  auto* o_agg = sweep->add_option("--aggregator", aggregators, "fedavg, median, trimmed_mean, clipped_noisy, fednia")
                    ->delimiter(',');
  o_delta->excludes(o_lambda)->excludes(o_agg);
  o_lambda->excludes(o_agg);

  std::vector<std::string> reports;
  double alpha = 0.05;
  auto* analyze = app.add_subcommand("analyze", "Friedman test and average ranks over report.csv files");
  analyze->add_option("reports", reports, "report.csv files")->required()->check(CLI::ExistingFile);
  analyze->add_option("--alpha", alpha, "Significance level (only 0.05 is tabulated)");

  std::string images, labels, attack;
  std::size_t limit = 0;
  auto* audit = app.add_subcommand("poison-audit", "Summarise what an attack does to a dataset");
  audit->add_option("--images", images, "IDX image file")->required();
  audit->add_option("--labels", labels, "IDX label file")->required();
  audit->add_option("--attack", attack, "Attack spec (JSON)")->required();
  audit->add_option("--limit", limit, "Use only the first N samples");

  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  validate->add_option("config", config, "Experiment config (JSON)")->required();

  std::size_t n_train = 10000, n_test = 2000;
  auto* make = app.add_subcommand("make-dataset", "Write synthetic digits as IDX files");
  make->add_option("--train", n_train, "Training samples")->check(CLI::PositiveNumber);
  make->add_option("--test", n_test, "Test samples")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsageExit;
  }

  try {
    if (*run) return cmd_run(config, g);
    if (*sweep) {
      if (!*o_delta && !*o_lambda && !*o_agg) {
        std::fprintf(stderr, "sweep: give one of --delta, --lambda or --aggregator with at least one value\n");
        return kUsageExit;
      }
      if (*o_delta) return cmd_sweep(config, SweepAxis::Delta, deltas, g);
      if (*o_lambda) return cmd_sweep(config, SweepAxis::Lambda, lambdas, g);
      return cmd_sweep(config, SweepAxis::Aggregator, aggregators, g);
    }
    if (*analyze) return cmd_analyze(reports, alpha, g);
    if (*audit) return cmd_poison_audit(images, labels, attack, limit, g);
    if (*validate) return cmd_validate(config, g);
    if (*make) return cmd_make_dataset(n_train, n_test, g);
  } catch (const Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
