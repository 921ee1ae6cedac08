#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace fednia {

enum class FilterFallback { None, MinSurvivors, DetectorDiverged };

inline std::string to_string(FilterFallback f) {
  switch (f) {
    case FilterFallback::None: return "none";
    case FilterFallback::MinSurvivors: return "min_survivors";
    case FilterFallback::DetectorDiverged: return "detector_diverged";
  }
  return "unknown";
}

/// Everything recorded about one federated round. Defense fields stay empty
/// for undefended runs; evaluation fields are only set on evaluation rounds.
struct RoundReport {
  std::size_t round = 0;

  // defense telemetry
  bool defended = false;
  std::vector<std::pair<std::size_t, double>> errors;  // (client id, e_i), client-id order
  double mean_error = 0.0;
  double tau = 0.0;
  double sigma = 0.0;
  std::vector<std::size_t> survivors;
  std::vector<std::size_t> rejected;
  FilterFallback fallback = FilterFallback::None;
  double detector_final_loss = 0.0;
  std::vector<double> detector_loss_curve;

  // harness-only ground truth; never visible to the defense
  std::set<std::size_t> ground_truth_malicious;

  // metrics
  double train_loss = 0.0;  // mean over clients of their last local epoch
  std::optional<double> test_loss;
  std::optional<double> accuracy;
  std::optional<double> targeted_accuracy;
  std::optional<double> asr;
  std::optional<double> detection_precision;
  std::optional<double> detection_recall;
  bool precision_undefined = false;
  double wall_ms = 0.0;
};

}  // namespace fednia
