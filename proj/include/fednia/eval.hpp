#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "fednia/data.hpp"
#include "fednia/nn.hpp"
#include "fednia/report.hpp"

namespace fednia {

/// Argmax class per row of the model output.
inline std::vector<int> predict_labels(const WeightSet& w, const Matrix& samples, std::size_t chunk = 1024) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(samples.rows()));
  for (Eigen::Index start = 0; start < samples.rows(); start += static_cast<Eigen::Index>(chunk)) {
    const Eigen::Index n = std::min<Eigen::Index>(static_cast<Eigen::Index>(chunk), samples.rows() - start);
    const Matrix probs = predict(w, Matrix(samples.middleRows(start, n)));
    for (Eigen::Index r = 0; r < n; ++r) {
      Eigen::Index arg = 0;
      probs.row(r).maxCoeff(&arg);
      out.push_back(static_cast<int>(arg));
    }
  }
  return out;
}

inline double accuracy(const WeightSet& w, const LabeledDataset& test) {
  require(test.size() > 0, ErrorKind::Evaluation, "accuracy on an empty test set");
  const auto pred = predict_labels(w, test.samples);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.labels[i];
  return static_cast<double>(hit) / static_cast<double>(test.size());
}

/// Accuracy restricted to rows labelled `cls`.
inline double targeted_accuracy(const WeightSet& w, const LabeledDataset& test, int cls) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.labels[i] == cls) rows.push_back(i);
  require(!rows.empty(), ErrorKind::Evaluation, "test set has no samples of class " + std::to_string(cls));
  return accuracy(w, subset(test, rows));
}

/// Fraction of triggered samples classified as the attacker's label. The
/// triggered set already carries that label, so this is plain accuracy on it.
inline double attack_success_rate(const WeightSet& w, const LabeledDataset& triggered) {
  require(triggered.size() > 0, ErrorKind::Evaluation, "attack success rate on an empty triggered set");
  return accuracy(w, triggered);
}

/// Maps ASR to an accuracy-like score; applying it twice is the identity.
inline double asr_to_accuracy(double asr) { return 1.0 - asr; }

inline double mean_cross_entropy(const WeightSet& w, const LabeledDataset& test) {
  require(test.size() > 0, ErrorKind::Evaluation, "loss on an empty test set");
  return loss_value(w, test.samples, LossTarget<float>::cross_entropy(test.labels));
}

struct DetectionQuality {
  double precision = 1.0;
  double recall = 1.0;
  bool precision_undefined = false;  // nothing rejected: precision reported as 1.0
};

/// Precision and recall of the rejected set against the true malicious ids.
/// With no malicious clients recall is 1.0 by convention.
inline DetectionQuality detection_quality(const std::vector<std::size_t>& rejected,
                                          const std::set<std::size_t>& malicious) {
  DetectionQuality q;
  std::size_t tp = 0;
  for (std::size_t id : rejected) tp += malicious.contains(id);
  if (rejected.empty()) {
    q.precision = 1.0;
    q.precision_undefined = true;
  } else {
    q.precision = static_cast<double>(tp) / static_cast<double>(rejected.size());
  }
  q.recall = malicious.empty() ? 1.0 : static_cast<double>(tp) / static_cast<double>(malicious.size());
  return q;
}

inline DetectionQuality detection_quality(const RoundReport& report) {
  return detection_quality(report.rejected, report.ground_truth_malicious);
}

// ---------------------------------------------------------------------------
// Friedman test with Nemenyi post-hoc critical difference

/// Rows are experiments, columns are methods; larger entries are better.
struct ResultMatrix {
  std::vector<std::string> experiments;
  std::vector<std::string> methods;
  std::vector<std::vector<double>> values;  // [experiment][method]
};

/// Studentized-range based q_alpha for alpha = 0.05, indexed by method
/// count 2..10.
inline double nemenyi_q05(std::size_t methods) {
  static constexpr double kTable[] = {1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164};
  require(methods >= 2 && methods <= 10, ErrorKind::Analysis, "Nemenyi table covers 2..10 methods");
  return kTable[methods - 2];
}

/// Ranks within one row: 1 = best (largest), ties get the average rank.
inline std::vector<double> rank_row(const std::vector<double>& row) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  std::vector<double> ranks(row.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && row[order[j + 1]] == row[order[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

struct FriedmanResult {
  double statistic = 0.0;
  std::vector<double> avg_ranks;  // per method, matrix column order
  double critical_difference = 0.0;
  double alpha = 0.05;
  // Maximal sets (two or more methods) whose average ranks span less than CD.
  std::vector<std::vector<std::string>> groups;
};

inline FriedmanResult friedman_test(const ResultMatrix& m, double alpha = 0.05) {
  const std::size_t N = m.values.size();
  const std::size_t k = m.methods.size();
  require(k >= 2 && N >= 2, ErrorKind::Analysis, "Friedman test needs >= 2 methods and >= 2 experiments");
  require(alpha == 0.05, ErrorKind::Analysis, "only alpha = 0.05 is tabulated");
  for (const auto& row : m.values) {
    require(row.size() == k, ErrorKind::Analysis, "result matrix is not rectangular");
    for (double v : row) require(std::isfinite(v), ErrorKind::Analysis, "result matrix has a missing entry");
  }

  FriedmanResult r;
  r.alpha = alpha;
  r.avg_ranks.assign(k, 0.0);
  for (const auto& row : m.values) {
    const auto ranks = rank_row(row);
    for (std::size_t j = 0; j < k; ++j) r.avg_ranks[j] += ranks[j];
  }
  for (double& v : r.avg_ranks) v /= static_cast<double>(N);

  const double kd = static_cast<double>(k), Nd = static_cast<double>(N);
  double sum_sq = 0.0;
  for (double R : r.avg_ranks) sum_sq += R * R;
  r.statistic = 12.0 * Nd / (kd * (kd + 1.0)) * (sum_sq - kd * (kd + 1.0) * (kd + 1.0) / 4.0);
  r.critical_difference = nemenyi_q05(k) * std::sqrt(kd * (kd + 1.0) / (6.0 * Nd));

  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return r.avg_ranks[a] < r.avg_ranks[b]; });
  std::size_t last_end = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i;
    while (j + 1 < k && r.avg_ranks[order[j + 1]] - r.avg_ranks[order[i]] < r.critical_difference) ++j;
    if (j > i && (i == 0 || j > last_end)) {
      std::vector<std::string> g;
      for (std::size_t t = i; t <= j; ++t) g.push_back(m.methods[order[t]]);
      r.groups.push_back(std::move(g));
      last_end = j;
    }
  }
  return r;
}

}  // namespace fednia
