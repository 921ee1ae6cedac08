#pragma once

// Data-poisoning transforms applied by malicious clients to their local data
// before training. Every transform is a pure function of (dataset, spec):
// sample count and feature dimension are preserved, pixels stay in [0, 1],
// and gamma = 0 returns the input unchanged.

#include <map>
#include <optional>
#include <string>

#include "fednia/data.hpp"

namespace fednia {

enum class AttackKind {
  SamplePoisonUntargeted,
  SamplePoisonTargeted,
  LabelFlipUntargeted,
  LabelFlipTargeted,
  Backdoor,
};

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::SamplePoisonUntargeted: return "sample_poison_untargeted";
    case AttackKind::SamplePoisonTargeted: return "sample_poison_targeted";
    case AttackKind::LabelFlipUntargeted: return "label_flip_untargeted";
    case AttackKind::LabelFlipTargeted: return "label_flip_targeted";
    case AttackKind::Backdoor: return "backdoor";
  }
  return "unknown";
}

inline AttackKind attack_kind_from_string(std::string_view s) {
  for (auto k : {AttackKind::SamplePoisonUntargeted, AttackKind::SamplePoisonTargeted, AttackKind::LabelFlipUntargeted,
                 AttackKind::LabelFlipTargeted, AttackKind::Backdoor})
    if (to_string(k) == s) return k;
  fail(ErrorKind::Config, "unknown attack kind '" + std::string(s) + "'");
}

/// Axis-aligned pixel patch written at a fixed intensity.
struct TriggerPatch {
  std::size_t row = 0, col = 0;
  std::size_t height = 3, width = 3;
  double intensity = 1.0;

  friend bool operator==(const TriggerPatch&, const TriggerPatch&) = default;
};

struct AttackSpec {
  AttackKind kind = AttackKind::LabelFlipUntargeted;
  double gamma = 1.0;
  std::optional<int> target_class;
  std::map<int, int> label_map;
  std::optional<TriggerPatch> trigger;
  std::optional<int> backdoor_label;
  std::uint64_t seed = 0;
  double noise_scale = 1.0;

  friend bool operator==(const AttackSpec&, const AttackSpec&) = default;

  /// The class whose accuracy the attack is aimed at, if any.
  std::optional<int> attacked_class() const {
    if (target_class) return target_class;
    if (kind == AttackKind::LabelFlipTargeted && !label_map.empty()) return label_map.begin()->first;
    return std::nullopt;
  }

  /// Throws Spec errors for inconsistent specs. num_classes and the image
  /// grid are optional context for range checks.
  void validate(int num_classes = 0, std::size_t image_rows = 0, std::size_t image_cols = 0) const {
    auto spec_err = [](const std::string& m) { fail(ErrorKind::Spec, m); };
    if (!(gamma >= 0.0 && gamma <= 1.0)) spec_err("gamma must lie in [0, 1]");
    if (!(noise_scale >= 0.0)) spec_err("noise_scale must be >= 0");
    auto in_range = [&](int c) { return c >= 0 && (num_classes == 0 || c < num_classes); };
    if (target_class && !in_range(*target_class)) spec_err("target_class out of range");
    switch (kind) {
      case AttackKind::SamplePoisonTargeted:
        if (!target_class) spec_err("targeted sample poisoning requires target_class");
        break;
      case AttackKind::LabelFlipTargeted:
        if (label_map.empty()) spec_err("targeted label flipping requires label_map");
        for (auto [from, to] : label_map) {
          if (from == to) spec_err("label_map maps class " + std::to_string(from) + " to itself");
          if (!in_range(from) || !in_range(to)) spec_err("label_map entry out of range");
        }
        if (target_class && !label_map.contains(*target_class)) spec_err("target_class is not in label_map");
        break;
      case AttackKind::Backdoor:
        if (!target_class) spec_err("backdoor requires target_class");
        if (!trigger) spec_err("backdoor requires a trigger patch");
        if (!backdoor_label) spec_err("backdoor requires backdoor_label");
        if (!in_range(*backdoor_label)) spec_err("backdoor_label out of range");
        if (*backdoor_label == *target_class) spec_err("backdoor_label must differ from target_class");
        if (trigger->height == 0 || trigger->width == 0) spec_err("trigger patch must be non-empty");
        if (!(trigger->intensity >= 0.0 && trigger->intensity <= 1.0)) spec_err("trigger intensity must lie in [0, 1]");
        if (image_rows && (trigger->row + trigger->height > image_rows || trigger->col + trigger->width > image_cols))
          spec_err("trigger patch lies outside the image grid");
        break;
      default:
        break;
    }
  }
};

/// Spec for the backdoor used throughout the experiments: 3x3 top-left patch
/// at full intensity, class 1 relabelled as 7.
inline AttackSpec default_backdoor(std::uint64_t seed = 0) {
  AttackSpec s;
  s.kind = AttackKind::Backdoor;
  s.target_class = 1;
  s.trigger = TriggerPatch{};
  s.backdoor_label = 7;
  s.seed = seed;
  return s;
}

inline LabeledDataset poison_samples(const LabeledDataset& ds, const AttackSpec& spec) {
  require(spec.kind == AttackKind::SamplePoisonUntargeted || spec.kind == AttackKind::SamplePoisonTargeted,
          ErrorKind::Spec, "poison_samples needs a sample-poisoning spec");
  spec.validate(ds.num_classes);
  LabeledDataset out = ds;
  Rng rng(derive_seed(spec.seed, "poison-samples"));
  const bool targeted = spec.kind == AttackKind::SamplePoisonTargeted;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (targeted && ds.labels[i] != *spec.target_class) continue;
    if (!rng.bernoulli(spec.gamma)) continue;
    auto row = out.samples.row(static_cast<Eigen::Index>(i));
    for (Eigen::Index j = 0; j < row.size(); ++j) {
      const double v = row(j) + rng.uniform(-spec.noise_scale, spec.noise_scale);
      row(j) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

inline LabeledDataset flip_labels(const LabeledDataset& ds, const AttackSpec& spec) {
  require(spec.kind == AttackKind::LabelFlipUntargeted || spec.kind == AttackKind::LabelFlipTargeted,
          ErrorKind::Spec, "flip_labels needs a label-flipping spec");
  spec.validate(ds.num_classes);
  LabeledDataset out = ds;
  Rng rng(derive_seed(spec.seed, "flip-labels"));
  for (auto& y : out.labels) {
    if (spec.kind == AttackKind::LabelFlipTargeted) {
      const auto it = spec.label_map.find(y);
      if (it != spec.label_map.end() && rng.bernoulli(spec.gamma)) y = it->second;
      continue;
    }
    if (ds.num_classes < 2 || !rng.bernoulli(spec.gamma)) continue;
    // uniform over the other num_classes - 1 labels
    const int r = static_cast<int>(rng.below(static_cast<std::uint64_t>(ds.num_classes - 1)));
    y = r >= y ? r + 1 : r;
  }
  return out;
}

inline void stamp_trigger(std::span<float> image, std::size_t image_cols, const TriggerPatch& t) {
  for (std::size_t r = t.row; r < t.row + t.height; ++r)
    for (std::size_t c = t.col; c < t.col + t.width; ++c) image[r * image_cols + c] = static_cast<float>(t.intensity);
}

/// Rows labelled target_class receive the trigger and the backdoor label,
/// each independently with probability gamma (gamma = 1 hits every such row).
inline LabeledDataset inject_backdoor(const LabeledDataset& ds, const AttackSpec& spec) {
  require(spec.kind == AttackKind::Backdoor, ErrorKind::Spec, "inject_backdoor needs a backdoor spec");
  require(ds.image_rows * ds.image_cols == ds.features(), ErrorKind::Spec, "backdoor needs image-shaped samples");
  spec.validate(ds.num_classes, ds.image_rows, ds.image_cols);
  LabeledDataset out = ds;
  Rng rng(derive_seed(spec.seed, "backdoor"));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] != *spec.target_class || !rng.bernoulli(spec.gamma)) continue;
    stamp_trigger(std::span<float>(out.samples.row(static_cast<Eigen::Index>(i)).data(), ds.features()), ds.image_cols,
                  *spec.trigger);
    out.labels[i] = *spec.backdoor_label;
  }
  return out;
}

/// All class-c test rows with the trigger applied, labelled with the label the
/// attacker wants predicted (the ground truth for attack success rate).
inline LabeledDataset make_triggered_testset(const LabeledDataset& test, const AttackSpec& spec) {
  require(spec.kind == AttackKind::Backdoor, ErrorKind::Spec, "triggered test set needs a backdoor spec");
  require(test.image_rows * test.image_cols == test.features(), ErrorKind::Spec, "backdoor needs image-shaped samples");
  spec.validate(test.num_classes, test.image_rows, test.image_cols);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.labels[i] == *spec.target_class) rows.push_back(i);
  LabeledDataset out = subset(test, rows);
  for (std::size_t i = 0; i < out.size(); ++i) {
    stamp_trigger(std::span<float>(out.samples.row(static_cast<Eigen::Index>(i)).data(), out.features()),
                  out.image_cols, *spec.trigger);
    out.labels[i] = *spec.backdoor_label;
  }
  return out;
}

/// Dispatches on spec.kind.
inline LabeledDataset apply_attack(const LabeledDataset& ds, const AttackSpec& spec) {
  switch (spec.kind) {
    case AttackKind::SamplePoisonUntargeted:
    case AttackKind::SamplePoisonTargeted:
      return poison_samples(ds, spec);
    case AttackKind::LabelFlipUntargeted:
    case AttackKind::LabelFlipTargeted:
      return flip_labels(ds, spec);
    case AttackKind::Backdoor:
      return inject_backdoor(ds, spec);
  }
  return ds;
}

}  // namespace fednia
