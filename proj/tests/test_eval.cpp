#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "support.hpp"

using namespace fednia;

namespace {

// Single softmax layer whose bias forces every prediction to `cls`.
WeightSet constant_model(std::size_t inputs, std::size_t classes, int cls) {
  WeightSet w;
  Vector b = Vector::Zero(static_cast<Eigen::Index>(classes));
  b[cls] = 100.0f;
  w.layers.push_back({{inputs, classes, Activation::Softmax},
                      Matrix::Zero(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(inputs)), b});
  return w;
}

ResultMatrix fixture() {
  // Hand ranking (1 = best, ties averaged):
  //   e1: 1 2 3 4      e2: 1.5 1.5 3 4    e3: 2 1 3 4
  //   e4: 1 3 2 4      e5: 2 1 4 3        e6: 1 2.5 2.5 4
  // Rank sums 8.5, 11, 17.5, 23 over N = 6 rows.
  return {{"e1", "e2", "e3", "e4", "e5", "e6"},
          {"A", "B", "C", "D"},
          {{0.90, 0.85, 0.80, 0.70},
           {0.88, 0.88, 0.75, 0.60},
           {0.70, 0.95, 0.65, 0.60},
           {0.92, 0.80, 0.85, 0.50},
           {0.80, 0.82, 0.60, 0.61},
           {0.91, 0.87, 0.87, 0.40}}};
}

}  // namespace

TEST(Accuracy, ConstantModelOnBalancedSet) {
  const auto ds = synth::make_digits(500, 1);
  EXPECT_DOUBLE_EQ(accuracy(constant_model(784, 10, 4), ds), 0.1);
}

TEST(Accuracy, RandomModelNearChance) {
  const auto ds = synth::make_digits(10000, 2);
  // Each row's prediction is a uniform draw independent of its label.
  Rng rng(3);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) hit += static_cast<int>(rng.below(10)) == ds.labels[i];
  EXPECT_NEAR(static_cast<double>(hit) / 1e4, 0.1, 0.02);
  // An untrained network is far from uniform per row but still near chance overall.
  const std::size_t hidden[] = {32};
  const auto w = init_weights(classifier_specs(784, hidden, 10), 4);
  const double acc = accuracy(w, ds);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 0.3);
}

TEST(Accuracy, MemoriserScoresOne) {
  auto ds = fednia::testing::toy_dataset(10, 10, 4, 1);
  const std::size_t hidden[] = {32};
  auto w = init_weights(classifier_specs(16, hidden, 10), 2);
  w = train(w, ds.samples, ds.labels, TrainConfig{400, 0.5, 10, 1});
  EXPECT_DOUBLE_EQ(accuracy(w, ds), 1.0);
  EXPECT_DOUBLE_EQ(targeted_accuracy(w, ds, 3), 1.0);
}

TEST(Accuracy, EmptySetIsEvaluationError) {
  LabeledDataset empty;
  empty.samples = Matrix::Zero(0, 4);
  try {
    accuracy(constant_model(4, 2, 0), empty);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Evaluation);
  }
}

TEST(TargetedAccuracy, RestrictsToClass) {
  const auto ds = synth::make_digits(300, 1);
  const auto w = constant_model(784, 10, 4);
  EXPECT_DOUBLE_EQ(targeted_accuracy(w, ds, 4), 1.0);
  EXPECT_DOUBLE_EQ(targeted_accuracy(w, ds, 5), 0.0);
  auto no_fives = ds;
  for (auto& y : no_fives.labels)
    if (y == 5) y = 6;
  EXPECT_THROW(targeted_accuracy(w, no_fives, 5), Error);
}

TEST(AttackSuccessRate, ForcedAndChanceLevels) {
  const auto ds = synth::make_digits(2000, 6);
  const auto trig = make_triggered_testset(ds, default_backdoor());
  EXPECT_DOUBLE_EQ(attack_success_rate(constant_model(784, 10, 7), trig), 1.0);
  EXPECT_DOUBLE_EQ(attack_success_rate(constant_model(784, 10, 1), trig), 0.0);
  for (double x : {0.0, 0.25, 0.9, 1.0}) EXPECT_DOUBLE_EQ(asr_to_accuracy(asr_to_accuracy(x)), x);
}

TEST(DetectionQuality, Conventions) {
  auto q = detection_quality({3, 4}, {3, 4});
  EXPECT_EQ(q.precision, 1.0);
  EXPECT_EQ(q.recall, 1.0);
  q = detection_quality({}, {3, 4});
  EXPECT_EQ(q.recall, 0.0);
  EXPECT_EQ(q.precision, 1.0);
  EXPECT_TRUE(q.precision_undefined);
  q = detection_quality({1, 3, 4}, {3, 4});
  EXPECT_DOUBLE_EQ(q.precision, 2.0 / 3.0);
  EXPECT_EQ(q.recall, 1.0);
  EXPECT_EQ(detection_quality({}, {}).recall, 1.0);
}

TEST(Friedman, HandComputedFixture) {
  const auto r = friedman_test(fixture());
  ASSERT_EQ(r.avg_ranks.size(), 4u);
  EXPECT_NEAR(r.avg_ranks[0], 8.5 / 6.0, 1e-9);
  EXPECT_NEAR(r.avg_ranks[1], 11.0 / 6.0, 1e-9);
  EXPECT_NEAR(r.avg_ranks[2], 17.5 / 6.0, 1e-9);
  EXPECT_NEAR(r.avg_ranks[3], 23.0 / 6.0, 1e-9);
  // 12N/(k(k+1)) * (sum R^2 - k(k+1)^2/4) = 3.6 * (1028.5/36 - 25) = 12.85
  EXPECT_NEAR(r.statistic, 12.85, 1e-9);
  EXPECT_NEAR(r.critical_difference, 2.569 * std::sqrt(20.0 / 36.0), 1e-9);
  // A..C span 1.5 < CD; C..D span 0.917 < CD; A..D spans 2.42 > CD.
  ASSERT_EQ(r.groups.size(), 2u);
  EXPECT_EQ(r.groups[0], (std::vector<std::string>{"A", "B", "C"}));
  EXPECT_EQ(r.groups[1], (std::vector<std::string>{"C", "D"}));
}

TEST(Friedman, IdenticalMethodsAndStrictWinner) {
  ResultMatrix same{{"x", "y", "z"}, {"m1", "m2", "m3"}, {{1, 1, 1}, {0.5, 0.5, 0.5}, {0.2, 0.2, 0.2}}};
  const auto r = friedman_test(same);
  for (double v : r.avg_ranks) EXPECT_DOUBLE_EQ(v, 2.0);
  EXPECT_NEAR(r.statistic, 0.0, 1e-12);

  ResultMatrix winner{{"x", "y"}, {"a", "b", "c"}, {{0.9, 0.1, 0.2}, {0.8, 0.7, 0.75}}};
  EXPECT_DOUBLE_EQ(friedman_test(winner).avg_ranks[0], 1.0);
}

TEST(Friedman, RankSumsAndPermutationInvariance) {
  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 2 + rng.below(9), n = 2 + rng.below(10);
    ResultMatrix m;
    for (std::size_t j = 0; j < k; ++j) m.methods.push_back("m" + std::to_string(j));
    for (std::size_t i = 0; i < n; ++i) {
      m.experiments.push_back("e" + std::to_string(i));
      std::vector<double> row(k);
      for (double& v : row) v = std::round(rng.uniform() * 10) / 10;  // coarse values force ties
      m.values.push_back(row);
    }
    const auto r = friedman_test(m);
    double s = 0;
    for (double v : r.avg_ranks) s += v;
    EXPECT_NEAR(s, k * (k + 1) / 2.0, 1e-9);

    auto shuffled = m;
    Rng order(static_cast<std::uint64_t>(t));
    order.shuffle(shuffled.values.begin(), shuffled.values.end());
    EXPECT_EQ(friedman_test(shuffled).avg_ranks, r.avg_ranks);
  }
}

TEST(Friedman, DegenerateMatrixIsAnalysisError) {
  ResultMatrix one{{"x"}, {"a", "b"}, {{1, 2}}};
  try {
    friedman_test(one);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Analysis);
  }
  ResultMatrix ragged{{"x", "y"}, {"a", "b"}, {{1, 2}, {1}}};
  EXPECT_THROW(friedman_test(ragged), Error);
  ResultMatrix missing{{"x", "y"}, {"a", "b"}, {{1, 2}, {1, std::nan("")}}};
  EXPECT_THROW(friedman_test(missing), Error);
}

TEST(Analyze, ReportFilesToRanksAndJson) {
  const auto dir = fednia::testing::scratch_dir("analyze");
  const auto m = fixture();
  std::ofstream out(dir / "report.csv");
  out << kReportHeader << "\n";
  for (std::size_t e = 0; e < m.experiments.size(); ++e)
    for (std::size_t j = 0; j < m.methods.size(); ++j)
      out << m.methods[j] << ",digits," << m.experiments[e] << ",0.2,49,score," << m.values[e][j] << "\n";
  out.close();
  const auto res = analyze_reports({dir / "report.csv"}, 0.05, dir / "out");
  EXPECT_NEAR(res.friedman.statistic, 12.85, 1e-9);
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "ranks.csv"));
  std::ifstream fj(dir / "out" / "friedman.json");
  const auto j = nlohmann::json::parse(fj);
  EXPECT_NEAR(j["statistic"].get<double>(), 12.85, 1e-9);
  EXPECT_EQ(j["groups"].size(), 2u);
}

TEST(Analyze, MissingMethodRowIsAnalysisError) {
  const auto dir = fednia::testing::scratch_dir("analyze_missing");
  std::ofstream out(dir / "report.csv");
  out << kReportHeader << "\n"
      << "a,digits,x,0.2,9,score,0.9\n"
      << "b,digits,x,0.2,9,score,0.8\n"
      << "a,digits,y,0.2,9,score,0.7\n";
  out.close();
  try {
    analyze_reports({dir / "report.csv"}, 0.05, dir / "out");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Analysis);
  }
}
