#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "support.hpp"

using namespace fednia;
using fednia::testing::random_matrix;
using fednia::testing::random_weights;
using fednia::testing::relative_error;

namespace {

std::vector<LayerSpec> net_20_20_10() {
  return {{20, 20, Activation::ReLU}, {20, 10, Activation::Softmax}};
}

}  // namespace

// --- rng and seeds ---------------------------------------------------------

TEST(Rng, SameSeedSameStream) {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Rng, UniformStaysInRange) {
  Rng r(5);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const auto k = r.below(7);
    EXPECT_LT(k, 7u);
  }
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal(2.0, 3.0);
    s += x;
    s2 += x * x;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 2.0, 0.05);
  EXPECT_NEAR(var, 9.0, 0.15);
}

TEST(DeriveSeed, LabelsAndIndicesSeparateStreams) {
  std::set<std::uint64_t> seen;
  for (const char* label : {"a", "b", "partition", "noise"})
    for (std::size_t i = 0; i < 10; ++i) seen.insert(derive_seed(7, label, {i}));
  EXPECT_EQ(seen.size(), 40u);
  EXPECT_EQ(derive_seed(7, "noise", {3}), derive_seed(7, "noise", {3}));
  EXPECT_NE(derive_seed(7, "noise", {3}), derive_seed(8, "noise", {3}));
  EXPECT_NE(derive_seed(7, "noise", {1, 2}), derive_seed(7, "noise", {2, 1}));
}

TEST(BatchPlan, SizesAndPermutation) {
  const auto plan = batch_plan(45, 20, 1);
  ASSERT_EQ(plan.size(), 3u);
  EXPECT_EQ(plan[0].size(), 20u);
  EXPECT_EQ(plan[1].size(), 20u);
  EXPECT_EQ(plan[2].size(), 5u);
  std::vector<std::size_t> all;
  for (const auto& b : plan) all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(45);
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(all, expect);
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hits[i] += 1; });
  EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 7) fail(ErrorKind::Input, "boom");
                            }),
               Error);
}

// --- specs and init --------------------------------------------------------

TEST(Specs, SoftmaxOnlyLast) {
  std::vector<LayerSpec> bad{{4, 4, Activation::Softmax}, {4, 2, Activation::ReLU}};
  EXPECT_THROW(validate_specs(bad), Error);
  std::vector<LayerSpec> broken{{4, 3, Activation::ReLU}, {4, 2, Activation::Softmax}};
  EXPECT_THROW(validate_specs(broken), Error);
  std::vector<LayerSpec> zero{{0, 3, Activation::ReLU}};
  EXPECT_THROW(validate_specs(zero), Error);
}

TEST(Init, DeterministicForSeed) {
  std::vector<LayerSpec> specs{{4, 2, Activation::ReLU}};
  EXPECT_EQ(init_weights(specs, 7), init_weights(specs, 7));
  EXPECT_FALSE(init_weights(specs, 7) == init_weights(specs, 8));
}

TEST(Init, ZeroBiasesAndBoundedWeights) {
  std::vector<LayerSpec> specs{{784, 256, Activation::ReLU}, {256, 10, Activation::Softmax}};
  const auto w = init_weights(specs, 3);
  const double bound = std::sqrt(6.0 / 1040.0);
  EXPECT_TRUE((w.layers[0].bias.array() == 0.0f).all());
  EXPECT_TRUE((w.layers[1].bias.array() == 0.0f).all());
  EXPECT_LE(w.layers[0].weights.cwiseAbs().maxCoeff(), bound);
  // The bound should actually be approached, not just respected.
  EXPECT_GT(w.layers[0].weights.cwiseAbs().maxCoeff(), 0.99 * bound);
}

TEST(Init, IncompatibleSpecsIsConfigError) {
  std::vector<LayerSpec> specs{{4, 3, Activation::ReLU}, {2, 2, Activation::Softmax}};
  try {
    init_weights(specs, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
}

// --- forward ---------------------------------------------------------------

TEST(Forward, IdentityLayerPassesInputThrough) {
  WeightSet w;
  w.layers.push_back({{2, 2, Activation::Identity}, Matrix::Identity(2, 2), Vector::Zero(2)});
  Matrix x(1, 2);
  x << 1, 2;
  const auto out = forward(w, x);
  EXPECT_FLOAT_EQ(out.outputs(0, 0), 1.0f);
  EXPECT_FLOAT_EQ(out.outputs(0, 1), 2.0f);
  ASSERT_EQ(out.profiles.size(), 1u);
  EXPECT_EQ(out.profiles[0].values, (std::vector<double>{1.0, 2.0}));
}

TEST(Forward, SoftmaxRowsSumToOneAndReluNonNegative) {
  const std::size_t hidden[] = {16, 8};
  const auto specs = classifier_specs(12, hidden, 5);
  const auto w = random_weights(specs, 11, 3.0);
  const Matrix x = random_matrix(50, 12, 4, -20.0, 20.0);
  const auto out = forward(w, x);
  for (Eigen::Index r = 0; r < out.outputs.rows(); ++r) {
    EXPECT_NEAR(out.outputs.row(r).sum(), 1.0, 1e-6);
    EXPECT_GE(out.outputs.row(r).minCoeff(), 0.0f);
  }
  for (const auto& p : out.profiles) {
    for (std::size_t l = 0; l < 2; ++l)
      for (double v : p.layer(l)) EXPECT_GE(v, 0.0);
  }
}

TEST(Forward, SoftmaxSurvivesHugeLogits) {
  WeightSet w;
  Matrix W(2, 1);
  W << 1000.0f, -1000.0f;
  w.layers.push_back({{1, 2, Activation::Softmax}, W, Vector::Zero(2)});
  Matrix x(1, 1);
  x << 5.0f;
  const auto out = forward(w, x);
  EXPECT_TRUE(out.outputs.allFinite());
  EXPECT_FLOAT_EQ(out.outputs(0, 0), 1.0f);
}

TEST(Forward, ProfileLengthIsSumOfLayerWidths) {
  const std::size_t hidden[] = {256, 256, 128};
  const auto specs = classifier_specs(784, hidden, 10);
  const auto w = init_weights(specs, 1);
  const auto out = forward(w, Matrix(random_matrix(3, 784, 2)));
  ASSERT_EQ(out.profiles.size(), 3u);
  for (const auto& p : out.profiles) {
    EXPECT_EQ(p.size(), 650u);
    ASSERT_EQ(p.layer_offsets.size(), 4u);
    std::size_t expect = 0;
    for (const auto& s : p.layer_offsets) {
      EXPECT_EQ(s.start, expect);
      expect += s.length;
    }
    EXPECT_EQ(expect, p.size());
  }
}

TEST(Forward, ShapeAndInputErrors) {
  std::vector<LayerSpec> specs{{3, 2, Activation::Softmax}};
  const auto w = init_weights(specs, 0);
  try {
    forward(w, Matrix(Matrix::Zero(2, 4)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
  Matrix bad = Matrix::Zero(1, 3);
  bad(0, 1) = std::nanf("");
  try {
    forward(w, bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Input);
  }
}

// --- gradients -------------------------------------------------------------

namespace {

// Central differences on sampled coordinates of every layer, double precision.
template <class Loss>
void expect_fd_agreement(BasicWeightSet<double> w, const MatrixT<double>& x, const LossTarget<double>& target,
                         Loss loss, std::uint64_t seed) {
  const auto g = gradient(w, x, target);
  const double h = 1e-5;
  Rng rng(seed);
  std::size_t checked = 0;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& W = w.layers[l].weights;
    auto& b = w.layers[l].bias;
    for (int k = 0; k < 25; ++k) {
      const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(W.size())));
      const double orig = W.data()[i];
      W.data()[i] = orig + h;
      const double up = loss(w);
      W.data()[i] = orig - h;
      const double down = loss(w);
      W.data()[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = g.weights[l].data()[i];
      if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) continue;
      EXPECT_LE(relative_error(an, fd), 1e-4) << "layer " << l << " weight " << i << " analytic " << an << " fd " << fd;
      ++checked;
    }
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      const double orig = b[i];
      b[i] = orig + h;
      const double up = loss(w);
      b[i] = orig - h;
      const double down = loss(w);
      b[i] = orig;
      const double fd = (up - down) / (2 * h);
      if (std::abs(fd) < 1e-7 && std::abs(g.bias[l][i]) < 1e-7) continue;
      EXPECT_LE(relative_error(g.bias[l][i], fd), 1e-4) << "layer " << l << " bias " << i;
      ++checked;
    }
  }
  EXPECT_GT(checked, 20u);
}

}  // namespace

TEST(Gradient, CrossEntropyMatchesFiniteDifferences) {
  const auto w = random_weights<double>(net_20_20_10(), 21, 0.5);
  const MatrixT<double> x = random_matrix<double>(8, 20, 3, -1.0, 1.0);
  std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 9};
  const auto target = LossTarget<double>::cross_entropy(labels);
  expect_fd_agreement(w, x, target, [&](const BasicWeightSet<double>& v) { return loss_value(v, x, target); }, 1);
}

TEST(Gradient, LayerwiseRmseMatchesFiniteDifferences) {
  std::vector<LayerSpec> specs{{20, 20, Activation::ReLU}, {20, 10, Activation::Identity}};
  const auto w = random_weights<double>(specs, 5, 0.5);
  const MatrixT<double> x = random_matrix<double>(6, 20, 8, -1.0, 1.0);
  const MatrixT<double> y = random_matrix<double>(6, 10, 9, -1.0, 1.0);
  const auto target = LossTarget<double>::layerwise_rmse(y, {{0, 4}, {4, 6}});
  expect_fd_agreement(w, x, target, [&](const BasicWeightSet<double>& v) { return loss_value(v, x, target); }, 2);
}

TEST(Gradient, DetectorLossMatchesFiniteDifferences) {
  // Detector over a 20-20-10 model: sub-networks for widths 20, 20 and 10.
  const auto model = init_weights<float>(net_20_20_10(), 1);
  auto det = build_detector<double>(model.profile_segments(), 4);
  for (auto& s : det.subnets) {
    s = random_weights<double>(s.specs(), derive_seed(4, "s", {s.parameter_count()}), 0.4);
    // Positive biases keep the six-deep ReLU stacks from going dead.
    for (auto& l : s.layers) l.bias = l.bias.cwiseAbs().array() + 0.05;
  }
  const MatrixT<double> x = random_matrix<double>(5, 50, 6);
  const auto grads = detector_gradient(det, x);
  const double h = 1e-5;
  Rng rng(3);
  std::size_t checked = 0;
  for (std::size_t s = 0; s < det.subnets.size(); ++s)
    for (std::size_t l = 0; l < det.subnets[s].layers.size(); ++l)
      for (int k = 0; k < 8; ++k) {
        auto& W = det.subnets[s].layers[l].weights;
        const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(W.size())));
        const double orig = W.data()[i];
        W.data()[i] = orig + h;
        const double up = detector_loss(det, x);
        W.data()[i] = orig - h;
        const double down = detector_loss(det, x);
        W.data()[i] = orig;
        const double fd = (up - down) / (2 * h);
        const double an = grads[s].weights[l].data()[i];
        if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) continue;
        EXPECT_LE(relative_error(an, fd), 1e-4) << "subnet " << s << " layer " << l;
        ++checked;
      }
  EXPECT_GT(checked, 30u);
}

TEST(Gradient, SquaredErrorBiasOnIdentityLayer) {
  BasicWeightSet<double> w;
  MatrixT<double> W(3, 2);
  W << 0.5, -1, 2, 0.25, 0, 1;
  VectorT<double> b(3);
  b << 0.1, 0.2, 0.3;
  w.layers.push_back({{2, 3, Activation::Identity}, W, b});
  MatrixT<double> x(1, 2), t(1, 3);
  x << 1.0, 2.0;
  t << 0.0, 1.0, -1.0;
  const auto g = gradient(w, x, LossTarget<double>::squared_error(t));
  const VectorT<double> out = W * x.row(0).transpose() + b;
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(g.bias[0][j], 2.0 * (out[j] - t(0, j)) / 3.0, 1e-12);
}

TEST(Gradient, ZeroResidualHasZeroGradient) {
  std::vector<LayerSpec> specs{{4, 3, Activation::ReLU}, {3, 4, Activation::Identity}};
  auto w = random_weights<double>(specs, 2);
  const MatrixT<double> x = random_matrix<double>(3, 4, 1);
  const MatrixT<double> y = predict(w, x);
  const auto g = gradient(w, x, LossTarget<double>::layerwise_rmse(y, {{0, 4}}));
  EXPECT_LE(g.norm(), 1e-10);
  EXPECT_EQ(g.loss, 0.0);
}

TEST(Gradient, LabelOutOfRangeIsInputError) {
  const auto w = init_weights(net_20_20_10(), 0);
  const Matrix x = random_matrix(2, 20, 0);
  std::vector<int> labels{0, 10};
  try {
    gradient(w, x, LossTarget<float>::cross_entropy(labels));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Input);
  }
}

// --- training --------------------------------------------------------------

TEST(Train, ZeroLearningRateKeepsWeights) {
  const auto w = init_weights(net_20_20_10(), 2);
  const Matrix x = random_matrix(30, 20, 2);
  std::vector<int> y(30);
  for (int i = 0; i < 30; ++i) y[i] = i % 10;
  const auto out = train(w, x, y, TrainConfig{3, 0.0, 7, 1});
  EXPECT_EQ(out, w);
}

TEST(Train, OneStepMatchesHandDerivedBackprop) {
  // 2-2-2 net, ReLU hidden, softmax output, a single sample, batch 1.
  BasicWeightSet<double> w;
  MatrixT<double> W1(2, 2), W2(2, 2);
  W1 << 0.5, -0.3, 0.8, 0.2;
  W2 << 1.0, -1.0, 0.5, 0.7;
  VectorT<double> b1(2), b2(2);
  b1 << 0.3, -0.2;
  b2 << 0.0, 0.3;
  w.layers.push_back({{2, 2, Activation::ReLU}, W1, b1});
  w.layers.push_back({{2, 2, Activation::Softmax}, W2, b2});
  MatrixT<double> x(1, 2);
  x << 1.0, 2.0;
  std::vector<int> y{1};

  // By hand: z1 = W1 x + b1 = [0.5-0.6+0.3, 0.8+0.4-0.2] = [0.2, 1.0]; both active, h = z1.
  // z2 = W2 h + b2 = [0.2-1.0, 0.1+0.7+0.3] = [-0.8, 1.1]; dz2 = softmax(z2) - onehot(1).
  const double e0 = std::exp(-0.8), e1 = std::exp(1.1);
  const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
  const double dz2[2] = {p0, p1 - 1.0};
  const double h[2] = {0.2, 1.0};
  // dz1 = W2^T dz2 (relu' = 1 on both units).
  const double dz1[2] = {W2(0, 0) * dz2[0] + W2(1, 0) * dz2[1], W2(0, 1) * dz2[0] + W2(1, 1) * dz2[1]};
  const double lr = 0.1;

  const auto out = train(w, x, y, TrainConfig{1, lr, 1, 0});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      EXPECT_NEAR(out.layers[1].weights(i, j), W2(i, j) - lr * dz2[i] * h[j], 1e-12);
      EXPECT_NEAR(out.layers[0].weights(i, j), W1(i, j) - lr * dz1[i] * x(0, j), 1e-12);
    }
  for (int i = 0; i < 2; ++i) {
    EXPECT_NEAR(out.layers[1].bias[i], b2[i] - lr * dz2[i], 1e-12);
    EXPECT_NEAR(out.layers[0].bias[i], b1[i] - lr * dz1[i], 1e-12);
  }
}

TEST(Train, LossDecreasesOnSeparableToy) {
  const std::size_t m = 200;
  Matrix x(m, 2);
  std::vector<int> y(m);
  Rng rng(4);
  for (std::size_t i = 0; i < m; ++i) {
    y[i] = static_cast<int>(i % 2);
    const double c = y[i] ? 1.0 : -1.0;
    x(static_cast<Eigen::Index>(i), 0) = static_cast<float>(c + rng.uniform(-0.5, 0.5));
    x(static_cast<Eigen::Index>(i), 1) = static_cast<float>(c + rng.uniform(-0.5, 0.5));
  }
  std::vector<LayerSpec> specs{{2, 8, Activation::ReLU}, {8, 2, Activation::Softmax}};
  const auto w = init_weights(specs, 9);
  const double initial = loss_value(w, x, LossTarget<float>::cross_entropy(y));
  const auto res = train_with_history(w, x, y, TrainConfig{5, 0.02, 20, 1});
  ASSERT_EQ(res.epoch_losses.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_LT(res.epoch_losses[e], res.epoch_losses[e - 1]);
  EXPECT_LT(loss_value(res.weights, x, LossTarget<float>::cross_entropy(y)), initial);
}

TEST(Train, BitwiseReproducibleAndInputUntouched) {
  const auto w = init_weights(net_20_20_10(), 2);
  const auto copy = w;
  const Matrix x = random_matrix(45, 20, 2);
  std::vector<int> y(45);
  for (int i = 0; i < 45; ++i) y[i] = (i * 7) % 10;
  const TrainConfig cfg{2, 0.05, 20, 99};
  EXPECT_EQ(train(w, x, y, cfg), train(w, x, y, cfg));
  EXPECT_EQ(w, copy);
  EXPECT_FALSE(train(w, x, y, cfg) == train(w, x, y, TrainConfig{2, 0.05, 20, 100}));
}

TEST(Train, DivergenceCarriesEpoch) {
  const auto w = random_weights(net_20_20_10(), 2, 1.0);
  const Matrix x = random_matrix(40, 20, 2, 0.0, 1.0);
  std::vector<int> y(40, 3);
  try {
    train(w, x, y, TrainConfig{5, 1e30, 10, 0});
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Divergence);
    EXPECT_LE(e.epoch(), 5u);
  }
}

// --- serialization ---------------------------------------------------------

TEST(Serialize, WeightsRoundTripBitExact) {
  const std::size_t hidden[] = {7, 5};
  const auto w = random_weights(classifier_specs(9, hidden, 3), 12);
  const auto bytes = encode_weights(w, 77);
  const auto dec = decode_weights(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
  EXPECT_EQ(dec.weights, w);
  EXPECT_EQ(dec.seed, 77u);
  const auto dir = fednia::testing::scratch_dir("weights");
  save_weights(dir / "w.bin", w, 5);
  EXPECT_EQ(load_weights(dir / "w.bin").weights, w);
}

TEST(Serialize, CorruptFilesAreFormatErrors) {
  const std::vector<LayerSpec> specs{{3, 2, Activation::Softmax}};
  const auto bytes = encode_weights(init_weights(specs, 0));
  std::vector<unsigned char> v(bytes.begin(), bytes.end());
  auto expect_format = [](std::vector<unsigned char> b) {
    try {
      decode_weights(b);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Format);
    }
  };
  auto bad_magic = v;
  bad_magic[0] = 'X';
  expect_format(bad_magic);
  expect_format(std::vector<unsigned char>(v.begin(), v.end() - 4));
  auto extra = v;
  extra.push_back(0);
  expect_format(extra);
}
