#pragma once

// Declarative experiment configuration, stored as JSON. Parsing reports the
// dotted path of the offending field; to_json(from_json(x)) is a fixed point.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fednia/aggregate.hpp"
#include "fednia/attacks.hpp"
#include "fednia/data.hpp"
#include "fednia/defense.hpp"
#include "fednia/engine.hpp"

namespace fednia {

inline constexpr int kConfigSchemaVersion = 1;

struct DatasetConfig {
  enum class Source { Idx, Synthetic } source = Source::Synthetic;
  std::string name = "synthetic-digits";
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t synthetic_train = 10000;
  std::size_t synthetic_test = 2000;
  std::uint64_t synthetic_seed = 1;
  std::size_t train_limit = 0;  // 0 = use everything
  std::size_t test_limit = 0;
  int num_classes = 10;
  PartitionScheme scheme = PartitionScheme::UniformRandom;
  std::size_t classes_per_client = 2;
  bool repartition_each_round = false;
};

struct AttackAssignment {
  std::vector<std::size_t> clients;  // empty: chosen from the master seed
  AttackSpec spec;
};

struct EvalConfig {
  std::size_t every = 5;  // test-set metrics cadence; the final round is always evaluated
  bool dump_profiles = false;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/experiment";
  std::string method;  // label for reports; derived when empty
  DatasetConfig dataset;
  std::vector<std::size_t> hidden = {256, 256, 128};
  FederationConfig federation;
  std::vector<AttackAssignment> attacks;
  AggregatorSpec aggregator;
  std::optional<DefenseParams> defense;
  EvalConfig eval;

  std::string method_name() const {
    if (!method.empty()) return method;
    return defense ? "fednia" : aggregator.name();
  }

  std::string attack_name() const {
    if (attacks.empty() || federation.num_malicious == 0) return "none";
    return to_string(attacks.front().spec.kind);
  }
};

namespace config_detail {

using nlohmann::json;

[[noreturn]] inline void field_error(const std::string& path, const std::string& msg) {
  fail(ErrorKind::Config, "field '" + path + "': " + msg);
}

inline std::string join(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

template <class T>
T read(const json& j, const std::string& key, const std::string& base, const T& fallback) {
  const std::string path = join(base, key);
  if (!j.is_object()) field_error(base.empty() ? "<root>" : base, "expected an object");
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) field_error(path, "expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) field_error(path, "expected an integer");
      if constexpr (std::is_unsigned_v<T>)
        if (it->is_number_integer() && !it->is_number_unsigned()) field_error(path, "expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) field_error(path, "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) field_error(path, "expected a string");
    }
    return it->get<T>();
  } catch (const json::exception& e) {
    field_error(path, e.what());
  }
}

template <class T>
std::optional<T> read_opt(const json& j, const std::string& key, const std::string& base) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return read<T>(j, key, base, T{});
}

inline void reject_unknown(const json& j, const std::string& base, std::initializer_list<const char*> known) {
  if (!j.is_object()) field_error(base.empty() ? "<root>" : base, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) field_error(join(base, it.key()), "unknown field");
  }
}

// Infinite clip norms are written as null.
inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json attack_to_json(const AttackSpec& s) {
  json j = {{"kind", to_string(s.kind)}, {"gamma", s.gamma}, {"seed", s.seed}, {"noise_scale", s.noise_scale}};
  j["target_class"] = s.target_class ? json(*s.target_class) : json(nullptr);
  j["backdoor_label"] = s.backdoor_label ? json(*s.backdoor_label) : json(nullptr);
  json map = json::object();
  for (auto [a, b] : s.label_map) map[std::to_string(a)] = b;
  j["label_map"] = map;
  if (s.trigger)
    j["trigger"] = {{"row", s.trigger->row},       {"col", s.trigger->col},
                    {"height", s.trigger->height}, {"width", s.trigger->width},
                    {"intensity", s.trigger->intensity}};
  else
    j["trigger"] = nullptr;
  return j;
}

inline AttackSpec attack_from_json(const json& j, const std::string& base) {
  reject_unknown(j, base,
                 {"kind", "gamma", "seed", "noise_scale", "target_class", "backdoor_label", "label_map", "trigger"});
  AttackSpec s;
  try {
    s.kind = attack_kind_from_string(read<std::string>(j, "kind", base, ""));
  } catch (const Error& e) {
    field_error(join(base, "kind"), e.what());
  }
  s.gamma = read<double>(j, "gamma", base, 1.0);
  s.seed = read<std::uint64_t>(j, "seed", base, 0);
  s.noise_scale = read<double>(j, "noise_scale", base, 1.0);
  s.target_class = read_opt<int>(j, "target_class", base);
  s.backdoor_label = read_opt<int>(j, "backdoor_label", base);
  if (j.contains("label_map") && !j.at("label_map").is_null()) {
    const auto& m = j.at("label_map");
    if (!m.is_object()) field_error(join(base, "label_map"), "expected an object of class -> class");
    for (auto it = m.begin(); it != m.end(); ++it) {
      const std::string p = join(join(base, "label_map"), it.key());
      int from = 0;
      try {
        std::size_t used = 0;
        from = std::stoi(it.key(), &used);
        if (used != it.key().size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        field_error(p, "keys must be class ids");
      }
      if (!it.value().is_number_integer()) field_error(p, "expected an integer class id");
      s.label_map[from] = it.value().get<int>();
    }
  }
  if (j.contains("trigger") && !j.at("trigger").is_null()) {
    const auto& t = j.at("trigger");
    const std::string tb = join(base, "trigger");
    reject_unknown(t, tb, {"row", "col", "height", "width", "intensity"});
    TriggerPatch p;
    p.row = read<std::size_t>(t, "row", tb, 0);
    p.col = read<std::size_t>(t, "col", tb, 0);
    p.height = read<std::size_t>(t, "height", tb, 3);
    p.width = read<std::size_t>(t, "width", tb, 3);
    p.intensity = read<double>(t, "intensity", tb, 1.0);
    s.trigger = p;
  }
  try {
    s.validate();
  } catch (const Error& e) {
    field_error(base, e.what());
  }
  return s;
}

inline std::string direction_name(DefenseParams::Direction d) {
  return d == DefenseParams::Direction::ExcludeAbove ? "exclude_above" : "exclude_below";
}

}  // namespace config_detail

inline nlohmann::json attack_spec_to_json(const AttackSpec& s) { return config_detail::attack_to_json(s); }

inline AttackSpec attack_spec_from_json(const nlohmann::json& j) { return config_detail::attack_from_json(j, ""); }

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  using namespace config_detail;
  json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["method"] = c.method;

  const auto& d = c.dataset;
  j["dataset"] = {{"source", d.source == DatasetConfig::Source::Idx ? "idx" : "synthetic"},
                  {"name", d.name},
                  {"train_images", d.train_images},
                  {"train_labels", d.train_labels},
                  {"test_images", d.test_images},
                  {"test_labels", d.test_labels},
                  {"synthetic_train", d.synthetic_train},
                  {"synthetic_test", d.synthetic_test},
                  {"synthetic_seed", d.synthetic_seed},
                  {"train_limit", d.train_limit},
                  {"test_limit", d.test_limit},
                  {"num_classes", d.num_classes},
                  {"partition", d.scheme == PartitionScheme::UniformRandom ? "uniform" : "label_skew"},
                  {"classes_per_client", d.classes_per_client},
                  {"repartition_each_round", d.repartition_each_round}};

  j["model"] = {{"hidden", c.hidden}};

  const auto& f = c.federation;
  j["federation"] = {{"num_benign", f.num_benign},     {"num_malicious", f.num_malicious},
                     {"rounds", f.rounds},             {"local_epochs", f.local_epochs},
                     {"local_lr", f.local_lr},         {"global_lr", f.global_lr},
                     {"batch_size", f.batch_size}};

  j["attacks"] = json::array();
  for (const auto& a : c.attacks) j["attacks"].push_back({{"clients", a.clients}, {"spec", attack_to_json(a.spec)}});

  j["aggregator"] = {{"kind", c.aggregator.name()},
                     {"trim_fraction", c.aggregator.trim_fraction},
                     {"clip_norm", number_or_null(c.aggregator.clip_norm)},
                     {"noise_std", c.aggregator.noise_std}};

  if (c.defense) {
    const auto& p = *c.defense;
    j["defense"] = {{"nu", p.nu},
                    {"detector_epochs", p.detector_epochs},
                    {"detector_batch", p.detector_batch},
                    {"detector_lr", p.detector_lr},
                    {"lambda", p.lambda},
                    {"filter_direction", direction_name(p.filter_direction)},
                    {"min_survivors", p.min_survivors},
                    {"warm_start", p.warm_start},
                    {"noise",
                     {{"distribution", p.noise.kind == NoiseDistribution::Kind::Uniform01 ? "uniform01" : "gaussian"},
                      {"mean", p.noise.mean},
                      {"stddev", p.noise.stddev}}}};
  } else {
    j["defense"] = nullptr;
  }
  j["eval"] = {{"every", c.eval.every}, {"dump_profiles", c.eval.dump_profiles}};
  return j;
}

/// Parses and validates. Relative dataset paths resolve against `base_dir`.
inline ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using namespace config_detail;
  reject_unknown(j, "", {"schema_version", "seed", "output_dir", "method", "dataset", "model", "federation", "attacks",
                         "aggregator", "defense", "eval"});
  ExperimentConfig c;
  c.schema_version = read<int>(j, "schema_version", "", kConfigSchemaVersion);
  if (c.schema_version != kConfigSchemaVersion)
    field_error("schema_version", "unsupported version " + std::to_string(c.schema_version));
  c.seed = read<std::uint64_t>(j, "seed", "", 0);
  c.output_dir = read<std::string>(j, "output_dir", "", c.output_dir);
  c.method = read<std::string>(j, "method", "", "");

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    reject_unknown(d, "dataset",
                   {"source", "name", "train_images", "train_labels", "test_images", "test_labels", "synthetic_train",
                    "synthetic_test", "synthetic_seed", "train_limit", "test_limit", "num_classes", "partition",
                    "classes_per_client", "repartition_each_round"});
    auto& ds = c.dataset;
    const auto source = read<std::string>(d, "source", "dataset", "synthetic");
    if (source == "idx")
      ds.source = DatasetConfig::Source::Idx;
    else if (source == "synthetic")
      ds.source = DatasetConfig::Source::Synthetic;
    else
      field_error("dataset.source", "expected 'idx' or 'synthetic'");
    ds.name = read<std::string>(d, "name", "dataset", ds.source == DatasetConfig::Source::Idx ? "idx" : ds.name);
    auto path = [&](const char* key) {
      std::string p = read<std::string>(d, key, "dataset", "");
      if (!p.empty() && !base_dir.empty() && std::filesystem::path(p).is_relative()) p = (base_dir / p).string();
      return p;
    };
    ds.train_images = path("train_images");
    ds.train_labels = path("train_labels");
    ds.test_images = path("test_images");
    ds.test_labels = path("test_labels");
    ds.synthetic_train = read<std::size_t>(d, "synthetic_train", "dataset", ds.synthetic_train);
    ds.synthetic_test = read<std::size_t>(d, "synthetic_test", "dataset", ds.synthetic_test);
    ds.synthetic_seed = read<std::uint64_t>(d, "synthetic_seed", "dataset", ds.synthetic_seed);
    ds.train_limit = read<std::size_t>(d, "train_limit", "dataset", 0);
    ds.test_limit = read<std::size_t>(d, "test_limit", "dataset", 0);
    ds.num_classes = read<int>(d, "num_classes", "dataset", 10);
    const auto scheme = read<std::string>(d, "partition", "dataset", "uniform");
    if (scheme == "uniform")
      ds.scheme = PartitionScheme::UniformRandom;
    else if (scheme == "label_skew")
      ds.scheme = PartitionScheme::LabelSkew;
    else
      field_error("dataset.partition", "expected 'uniform' or 'label_skew'");
    ds.classes_per_client = read<std::size_t>(d, "classes_per_client", "dataset", 2);
    ds.repartition_each_round = read<bool>(d, "repartition_each_round", "dataset", false);
    if (ds.num_classes < 2 || ds.num_classes > 256) field_error("dataset.num_classes", "must lie in [2, 256]");
    if (ds.source == DatasetConfig::Source::Idx)
      for (const char* key : {"train_images", "train_labels", "test_images", "test_labels"})
        if (read<std::string>(d, key, "dataset", "").empty()) field_error(join("dataset", key), "required for idx source");
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, "model", {"hidden"});
    if (m.contains("hidden")) {
      const auto& h = m.at("hidden");
      if (!h.is_array()) field_error("model.hidden", "expected an array of layer widths");
      c.hidden.clear();
      for (std::size_t i = 0; i < h.size(); ++i) {
        if (!h[i].is_number_unsigned() || h[i].get<std::size_t>() == 0)
          field_error("model.hidden[" + std::to_string(i) + "]", "expected a positive integer");
        c.hidden.push_back(h[i].get<std::size_t>());
      }
    }
  }

  if (j.contains("federation")) {
    const auto& f = j.at("federation");
    reject_unknown(f, "federation",
                   {"num_benign", "num_malicious", "rounds", "local_epochs", "local_lr", "global_lr", "batch_size"});
    auto& fc = c.federation;
    fc.num_benign = read<std::size_t>(f, "num_benign", "federation", fc.num_benign);
    fc.num_malicious = read<std::size_t>(f, "num_malicious", "federation", fc.num_malicious);
    fc.rounds = read<std::size_t>(f, "rounds", "federation", fc.rounds);
    fc.local_epochs = read<std::size_t>(f, "local_epochs", "federation", fc.local_epochs);
    fc.local_lr = read<double>(f, "local_lr", "federation", fc.local_lr);
    fc.global_lr = read<double>(f, "global_lr", "federation", fc.global_lr);
    fc.batch_size = read<std::size_t>(f, "batch_size", "federation", fc.batch_size);
  }
  c.federation.seed = c.seed;
  try {
    c.federation.validate();
  } catch (const Error& e) {
    field_error("federation", e.what());
  }

  if (j.contains("attacks") && !j.at("attacks").is_null()) {
    const auto& arr = j.at("attacks");
    if (!arr.is_array()) field_error("attacks", "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string base = "attacks[" + std::to_string(i) + "]";
      reject_unknown(arr[i], base, {"clients", "spec"});
      AttackAssignment a;
      if (arr[i].contains("clients") && !arr[i].at("clients").is_null()) {
        const auto& ids = arr[i].at("clients");
        if (!ids.is_array()) field_error(base + ".clients", "expected an array of client ids");
        for (const auto& id : ids) {
          if (!id.is_number_unsigned()) field_error(base + ".clients", "client ids must be non-negative integers");
          a.clients.push_back(id.get<std::size_t>());
        }
      }
      if (!arr[i].contains("spec")) field_error(base + ".spec", "required");
      a.spec = attack_from_json(arr[i].at("spec"), base + ".spec");
      c.attacks.push_back(std::move(a));
    }
  }

  if (j.contains("aggregator")) {
    const auto& a = j.at("aggregator");
    reject_unknown(a, "aggregator", {"kind", "trim_fraction", "clip_norm", "noise_std"});
    try {
      c.aggregator.kind = aggregator_kind_from_string(read<std::string>(a, "kind", "aggregator", "fedavg"));
    } catch (const Error& e) {
      field_error("aggregator.kind", e.what());
    }
    c.aggregator.trim_fraction = read<double>(a, "trim_fraction", "aggregator", c.aggregator.trim_fraction);
    c.aggregator.clip_norm = read<double>(a, "clip_norm", "aggregator", c.aggregator.clip_norm);
    c.aggregator.noise_std = read<double>(a, "noise_std", "aggregator", c.aggregator.noise_std);
    try {
      c.aggregator.validate();
    } catch (const Error& e) {
      field_error("aggregator", e.what());
    }
  }

  if (j.contains("defense") && !j.at("defense").is_null()) {
    const auto& d = j.at("defense");
    reject_unknown(d, "defense",
                   {"nu", "detector_epochs", "detector_batch", "detector_lr", "lambda", "filter_direction",
                    "min_survivors", "warm_start", "noise"});
    DefenseParams p;
    p.nu = read<std::size_t>(d, "nu", "defense", p.nu);
    p.detector_epochs = read<std::size_t>(d, "detector_epochs", "defense", p.detector_epochs);
    p.detector_batch = read<std::size_t>(d, "detector_batch", "defense", p.detector_batch);
    p.detector_lr = read<double>(d, "detector_lr", "defense", p.detector_lr);
    p.lambda = read<double>(d, "lambda", "defense", p.lambda);
    const auto dir = read<std::string>(d, "filter_direction", "defense", "exclude_above");
    if (dir == "exclude_above")
      p.filter_direction = DefenseParams::Direction::ExcludeAbove;
    else if (dir == "exclude_below")
      p.filter_direction = DefenseParams::Direction::ExcludeBelow;
    else
      field_error("defense.filter_direction", "expected 'exclude_above' or 'exclude_below'");
    p.min_survivors = read<std::size_t>(d, "min_survivors", "defense", p.min_survivors);
    p.warm_start = read<bool>(d, "warm_start", "defense", false);
    if (d.contains("noise") && !d.at("noise").is_null()) {
      const auto& n = d.at("noise");
      reject_unknown(n, "defense.noise", {"distribution", "mean", "stddev"});
      const auto kind = read<std::string>(n, "distribution", "defense.noise", "uniform01");
      if (kind == "uniform01")
        p.noise.kind = NoiseDistribution::Kind::Uniform01;
      else if (kind == "gaussian")
        p.noise.kind = NoiseDistribution::Kind::Gaussian;
      else
        field_error("defense.noise.distribution", "expected 'uniform01' or 'gaussian'");
      p.noise.mean = read<double>(n, "mean", "defense.noise", 0.0);
      p.noise.stddev = read<double>(n, "stddev", "defense.noise", 1.0);
    }
    try {
      p.validate();
    } catch (const Error& e) {
      field_error("defense", e.what());
    }
    c.defense = p;
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown(e, "eval", {"every", "dump_profiles"});
    c.eval.every = read<std::size_t>(e, "every", "eval", c.eval.every);
    c.eval.dump_profiles = read<bool>(e, "dump_profiles", "eval", false);
    if (c.eval.every == 0) field_error("eval.every", "must be >= 1");
  }

  // Malicious id assignment must cover exactly num_malicious distinct ids.
  const std::size_t total = c.federation.total_clients();
  std::set<std::size_t> seen;
  std::size_t unassigned_entries = 0;
  for (std::size_t i = 0; i < c.attacks.size(); ++i) {
    if (c.attacks[i].clients.empty()) ++unassigned_entries;
    for (std::size_t id : c.attacks[i].clients) {
      if (id >= total) field_error("attacks[" + std::to_string(i) + "].clients", "client id " + std::to_string(id) + " >= k + r");
      if (!seen.insert(id).second)
        field_error("attacks[" + std::to_string(i) + "].clients", "client id " + std::to_string(id) + " assigned twice");
    }
  }
  if (unassigned_entries > 1) field_error("attacks", "at most one attack entry may omit its client list");
  if (unassigned_entries == 0 && seen.size() != c.federation.num_malicious)
    field_error("attacks", "assigned " + std::to_string(seen.size()) + " malicious clients but federation.num_malicious is " +
                               std::to_string(c.federation.num_malicious));
  if (unassigned_entries == 1 && seen.size() > c.federation.num_malicious)
    field_error("attacks", "more malicious clients assigned than federation.num_malicious");
  if (c.federation.num_malicious > 0 && c.attacks.empty())
    field_error("attacks", "num_malicious > 0 needs at least one attack entry");
  return c;
}

/// Fills an empty client list from the master seed so the malicious set is a
/// function of the config alone.
inline void resolve_malicious_ids(ExperimentConfig& c) {
  std::set<std::size_t> taken;
  AttackAssignment* open = nullptr;
  for (auto& a : c.attacks) {
    if (a.clients.empty())
      open = &a;
    else
      taken.insert(a.clients.begin(), a.clients.end());
  }
  if (!open) return;
  const std::size_t need = c.federation.num_malicious - taken.size();
  for (std::size_t id : permutation(c.federation.total_clients(), derive_seed(c.seed, "malicious-ids"))) {
    if (open->clients.size() == need) break;
    if (!taken.contains(id)) open->clients.push_back(id);
  }
  std::sort(open->clients.begin(), open->clients.end());
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

}  // namespace fednia
