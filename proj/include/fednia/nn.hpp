#pragma once

// Dense feedforward networks: forward passes that expose every layer's
// post-activation output, exact backpropagation for the three supported
// losses, and plain mini-batch SGD.
//
// Everything is templated on the scalar type. Models train in float; the
// gradient checks instantiate the same code in double.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fednia/common.hpp"

namespace fednia {

template <class T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using VectorT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Matrix = MatrixT<float>;
using Vector = VectorT<float>;

enum class Activation { ReLU, Softmax, Identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::Softmax: return "softmax";
    case Activation::Identity: return "identity";
  }
  return "unknown";
}

inline Activation activation_from_string(std::string_view name) {
  if (name == "relu") return Activation::ReLU;
  if (name == "softmax") return Activation::Softmax;
  if (name == "identity") return Activation::Identity;
  fail(ErrorKind::Config, "unknown activation '" + std::string(name) + "'");
}

struct LayerSpec {
  std::size_t input_size = 0;
  std::size_t output_size = 0;
  Activation activation = Activation::Identity;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// A (start, length) slice of a flat activation vector.
struct Segment {
  std::size_t start = 0;
  std::size_t length = 0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

inline std::vector<Segment> contiguous_segments(std::span<const std::size_t> lengths) {
  std::vector<Segment> out;
  out.reserve(lengths.size());
  std::size_t start = 0;
  for (std::size_t len : lengths) {
    out.push_back({start, len});
    start += len;
  }
  return out;
}

inline void validate_specs(std::span<const LayerSpec> specs) {
  require(!specs.empty(), ErrorKind::Config, "model needs at least one layer");
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto& s = specs[l];
    require(s.input_size >= 1 && s.output_size >= 1, ErrorKind::Config,
            "layer " + std::to_string(l) + " has a zero dimension");
    require(s.activation != Activation::Softmax || l + 1 == specs.size(), ErrorKind::Config,
            "softmax is only allowed on the final layer (layer " + std::to_string(l) + ")");
    if (l > 0)
      require(specs[l - 1].output_size == s.input_size, ErrorKind::Config,
              "layer " + std::to_string(l) + " expects " + std::to_string(s.input_size) + " inputs but layer " +
                  std::to_string(l - 1) + " produces " + std::to_string(specs[l - 1].output_size));
  }
}

/// Builds the spec list of a classifier: ReLU hidden layers, Softmax output.
inline std::vector<LayerSpec> classifier_specs(std::size_t input_size, std::span<const std::size_t> hidden,
                                               std::size_t num_classes) {
  std::vector<LayerSpec> specs;
  std::size_t in = input_size;
  for (std::size_t h : hidden) {
    specs.push_back({in, h, Activation::ReLU});
    in = h;
  }
  specs.push_back({in, num_classes, Activation::Softmax});
  validate_specs(specs);
  return specs;
}

template <class T>
struct BasicDenseLayer {
  LayerSpec spec;
  MatrixT<T> weights;  // output_size x input_size
  VectorT<T> bias;     // output_size

  friend bool operator==(const BasicDenseLayer& a, const BasicDenseLayer& b) {
    return a.spec == b.spec && a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols() &&
           a.bias.size() == b.bias.size() && a.weights == b.weights && a.bias == b.bias;
  }
};

template <class T>
struct BasicWeightSet {
  std::vector<BasicDenseLayer<T>> layers;

  std::size_t input_size() const { return layers.empty() ? 0 : layers.front().spec.input_size; }
  std::size_t output_size() const { return layers.empty() ? 0 : layers.back().spec.output_size; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
    return n;
  }

  /// eta: total number of activations across all layers.
  std::size_t activation_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.spec.output_size;
    return n;
  }

  std::vector<LayerSpec> specs() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers) out.push_back(l.spec);
    return out;
  }

  std::vector<Segment> profile_segments() const {
    std::vector<std::size_t> lengths;
    for (const auto& l : layers) lengths.push_back(l.spec.output_size);
    return contiguous_segments(lengths);
  }

  bool same_architecture(const BasicWeightSet& other) const { return specs() == other.specs(); }

  bool all_finite() const {
    for (const auto& l : layers)
      if (!l.weights.allFinite() || !l.bias.allFinite()) return false;
    return true;
  }

  template <class U>
  BasicWeightSet<U> cast() const {
    BasicWeightSet<U> out;
    for (const auto& l : layers) out.layers.push_back({l.spec, l.weights.template cast<U>(), l.bias.template cast<U>()});
    return out;
  }

  friend bool operator==(const BasicWeightSet& a, const BasicWeightSet& b) { return a.layers == b.layers; }
};

using DenseLayer = BasicDenseLayer<float>;
using WeightSet = BasicWeightSet<float>;

/// Uniform(-r, r) weights with r = sqrt(6 / (fan_in + fan_out)), zero biases.
template <class T = float>
BasicWeightSet<T> init_weights(std::span<const LayerSpec> specs, std::uint64_t seed) {
  validate_specs(specs);
  BasicWeightSet<T> w;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto& s = specs[l];
    Rng rng(derive_seed(seed, "init", {l}));
    const double bound = std::sqrt(6.0 / static_cast<double>(s.input_size + s.output_size));
    BasicDenseLayer<T> layer{s, MatrixT<T>(s.output_size, s.input_size), VectorT<T>::Zero(s.output_size)};
    for (Eigen::Index i = 0; i < layer.weights.size(); ++i)
      layer.weights.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
    w.layers.push_back(std::move(layer));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Forward pass

struct ActivationProfile {
  std::vector<double> values;
  std::vector<Segment> layer_offsets;

  std::size_t size() const { return values.size(); }

  std::span<const double> layer(std::size_t l) const {
    return std::span<const double>(values).subspan(layer_offsets[l].start, layer_offsets[l].length);
  }
};

template <class T>
void apply_activation(Activation a, MatrixT<T>& z) {
  switch (a) {
    case Activation::ReLU:
      z = z.cwiseMax(T(0));
      break;
    case Activation::Softmax:
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      break;
    case Activation::Identity:
      break;
  }
}

/// Per-layer cache of one forward pass. `post[l]` is layer l's output;
/// `logits` keeps the final layer's pre-activation for a stable log-softmax.
template <class T>
struct ForwardCache {
  std::vector<MatrixT<T>> post;
  MatrixT<T> logits;
};

template <class T>
void check_batch(const BasicWeightSet<T>& w, const MatrixT<T>& batch) {
  require(!w.layers.empty(), ErrorKind::Shape, "empty model");
  require(static_cast<std::size_t>(batch.cols()) == w.input_size(), ErrorKind::Shape,
          "batch has " + std::to_string(batch.cols()) + " columns, model expects " + std::to_string(w.input_size()));
  require(batch.allFinite(), ErrorKind::Input, "batch contains non-finite values");
}

template <class T>
ForwardCache<T> forward_cache(const BasicWeightSet<T>& w, const MatrixT<T>& batch) {
  check_batch(w, batch);
  ForwardCache<T> cache;
  cache.post.reserve(w.layers.size());
  const MatrixT<T>* input = &batch;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    MatrixT<T> z = (*input) * layer.weights.transpose();
    z.rowwise() += layer.bias.transpose();
    if (l + 1 == w.layers.size()) cache.logits = z;
    apply_activation(layer.spec.activation, z);
    cache.post.push_back(std::move(z));
    input = &cache.post.back();
  }
  return cache;
}

template <class T>
struct ForwardResult {
  MatrixT<T> outputs;
  std::vector<ActivationProfile> profiles;
};

/// One ActivationProfile per input row: every layer's post-activation output
/// concatenated in layer order, the final layer included.
template <class T>
ForwardResult<T> forward(const BasicWeightSet<T>& w, const MatrixT<T>& batch) {
  auto cache = forward_cache(w, batch);
  const auto segments = w.profile_segments();
  const std::size_t eta = w.activation_count();
  ForwardResult<T> out;
  out.profiles.resize(static_cast<std::size_t>(batch.rows()));
  for (Eigen::Index r = 0; r < batch.rows(); ++r) {
    auto& p = out.profiles[static_cast<std::size_t>(r)];
    p.values.resize(eta);
    p.layer_offsets = segments;
    for (std::size_t l = 0; l < cache.post.size(); ++l)
      for (std::size_t j = 0; j < segments[l].length; ++j)
        p.values[segments[l].start + j] = static_cast<double>(cache.post[l](r, static_cast<Eigen::Index>(j)));
  }
  out.outputs = std::move(cache.post.back());
  return out;
}

/// Final-layer outputs only.
template <class T>
MatrixT<T> predict(const BasicWeightSet<T>& w, const MatrixT<T>& batch) {
  return std::move(forward_cache(w, batch).post.back());
}

// ---------------------------------------------------------------------------
// Losses and backpropagation

enum class LossKind {
  CrossEntropy,    // softmax output vs integer labels, mean over the batch
  SquaredError,    // per-row mean of squared residuals, mean over the batch
  LayerwiseRmse,   // per-row mean over segments of segment RMSE, mean over the batch
};

template <class T>
struct LossTarget {
  LossKind kind = LossKind::CrossEntropy;
  std::span<const int> labels;
  const MatrixT<T>* targets = nullptr;
  std::vector<Segment> segments;

  static LossTarget cross_entropy(std::span<const int> labels) { return {LossKind::CrossEntropy, labels, nullptr, {}}; }
  static LossTarget squared_error(const MatrixT<T>& targets) { return {LossKind::SquaredError, {}, &targets, {}}; }
  static LossTarget layerwise_rmse(const MatrixT<T>& targets, std::vector<Segment> segments) {
    return {LossKind::LayerwiseRmse, {}, &targets, std::move(segments)};
  }
};

template <class T>
struct Gradient {
  std::vector<MatrixT<T>> weights;
  std::vector<VectorT<T>> bias;
  double loss = 0.0;

  double norm() const {
    double s = 0.0;
    for (const auto& m : weights) s += static_cast<double>(m.squaredNorm());
    for (const auto& b : bias) s += static_cast<double>(b.squaredNorm());
    return std::sqrt(s);
  }
};

namespace detail {

template <class T>
void check_target(const BasicWeightSet<T>& w, const MatrixT<T>& batch, const LossTarget<T>& target) {
  const auto rows = static_cast<std::size_t>(batch.rows());
  require(rows >= 1, ErrorKind::Shape, "empty batch");
  if (target.kind == LossKind::CrossEntropy) {
    require(w.layers.back().spec.activation == Activation::Softmax, ErrorKind::Config,
            "cross-entropy requires a softmax output layer");
    require(target.labels.size() == rows, ErrorKind::Shape, "label count does not match batch rows");
    for (int y : target.labels)
      require(y >= 0 && static_cast<std::size_t>(y) < w.output_size(), ErrorKind::Input,
              "label " + std::to_string(y) + " outside [0, " + std::to_string(w.output_size()) + ")");
    return;
  }
  require(target.targets != nullptr, ErrorKind::Shape, "regression loss needs a target matrix");
  require(target.targets->rows() == batch.rows() && static_cast<std::size_t>(target.targets->cols()) == w.output_size(),
          ErrorKind::Shape, "target matrix shape does not match model output");
  if (target.kind == LossKind::LayerwiseRmse) {
    require(!target.segments.empty(), ErrorKind::Shape, "layerwise RMSE needs segments");
    std::size_t expect = 0;
    for (const auto& s : target.segments) {
      require(s.start == expect && s.length >= 1, ErrorKind::Shape, "segments must be contiguous and non-empty");
      expect += s.length;
    }
    require(expect == w.output_size(), ErrorKind::Shape, "segments do not cover the output");
  }
}

/// Mean loss over the batch and dL/d(final pre-activation).
template <class T>
double output_loss_and_delta(const BasicWeightSet<T>& w, const ForwardCache<T>& cache, const LossTarget<T>& target,
                             MatrixT<T>* delta) {
  const MatrixT<T>& out = cache.post.back();
  const Eigen::Index rows = out.rows();
  const double inv_rows = 1.0 / static_cast<double>(rows);
  double loss = 0.0;
  MatrixT<T> d_out;  // dL/d(post-activation), unused for cross-entropy

  switch (target.kind) {
    case LossKind::CrossEntropy: {
      for (Eigen::Index r = 0; r < rows; ++r) {
        const auto z = cache.logits.row(r);
        const double mx = static_cast<double>(z.maxCoeff());
        double sum = 0.0;
        for (Eigen::Index j = 0; j < z.size(); ++j) sum += std::exp(static_cast<double>(z(j)) - mx);
        loss += -(static_cast<double>(z(target.labels[static_cast<std::size_t>(r)])) - mx - std::log(sum));
      }
      loss *= inv_rows;
      if (delta) {
        *delta = out;
        for (Eigen::Index r = 0; r < rows; ++r) (*delta)(r, target.labels[static_cast<std::size_t>(r)]) -= T(1);
        *delta *= static_cast<T>(inv_rows);
      }
      return loss;
    }
    case LossKind::SquaredError: {
      const MatrixT<T> resid = out - *target.targets;
      const double n = static_cast<double>(out.cols());
      for (Eigen::Index r = 0; r < rows; ++r) loss += static_cast<double>(resid.row(r).squaredNorm()) / n;
      loss *= inv_rows;
      if (delta) d_out = resid * static_cast<T>(2.0 * inv_rows / n);
      break;
    }
    case LossKind::LayerwiseRmse: {
      const MatrixT<T> resid = out - *target.targets;
      const double num_segments = static_cast<double>(target.segments.size());
      if (delta) d_out = MatrixT<T>::Zero(out.rows(), out.cols());
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (const auto& s : target.segments) {
          const auto seg = resid.row(r).segment(static_cast<Eigen::Index>(s.start), static_cast<Eigen::Index>(s.length));
          double sq = 0.0;
          for (Eigen::Index j = 0; j < seg.size(); ++j) sq += static_cast<double>(seg(j)) * static_cast<double>(seg(j));
          const double rmse = std::sqrt(sq / static_cast<double>(s.length));
          loss += rmse;
          // d rmse / d r_j = r_j / (n * rmse); zero residual contributes no gradient.
          if (delta && rmse > 0.0) {
            const double scale = inv_rows / (num_segments * static_cast<double>(s.length) * rmse);
            d_out.row(r).segment(static_cast<Eigen::Index>(s.start), static_cast<Eigen::Index>(s.length)) =
                seg * static_cast<T>(scale);
          }
        }
      }
      loss *= inv_rows / num_segments;
      break;
    }
  }

  if (delta) {
    const auto act = w.layers.back().spec.activation;
    if (act == Activation::ReLU) {
      *delta = d_out.cwiseProduct((out.array() > T(0)).matrix().template cast<T>());
    } else if (act == Activation::Softmax) {
      // J^T v for softmax: a * (v - <v, a>)
      *delta = MatrixT<T>(out.rows(), out.cols());
      for (Eigen::Index r = 0; r < rows; ++r) {
        const T dot = d_out.row(r).dot(out.row(r));
        delta->row(r) = out.row(r).cwiseProduct((d_out.row(r).array() - dot).matrix());
      }
    } else {
      *delta = std::move(d_out);
    }
  }
  return loss;
}

}  // namespace detail

template <class T>
double loss_value(const BasicWeightSet<T>& w, const MatrixT<T>& batch, const LossTarget<T>& target) {
  detail::check_target(w, batch, target);
  const auto cache = forward_cache(w, batch);
  return detail::output_loss_and_delta(w, cache, target, static_cast<MatrixT<T>*>(nullptr));
}

/// Exact gradient of the mean batch loss w.r.t. every weight and bias.
template <class T>
Gradient<T> gradient(const BasicWeightSet<T>& w, const MatrixT<T>& batch, const LossTarget<T>& target) {
  check_batch(w, batch);
  detail::check_target(w, batch, target);
  const auto cache = forward_cache(w, batch);
  Gradient<T> g;
  const std::size_t L = w.layers.size();
  g.weights.resize(L);
  g.bias.resize(L);

  MatrixT<T> delta;
  g.loss = detail::output_loss_and_delta(w, cache, target, &delta);

  for (std::size_t l = L; l-- > 0;) {
    const MatrixT<T>& input = l == 0 ? batch : cache.post[l - 1];
    g.weights[l] = delta.transpose() * input;
    g.bias[l] = delta.colwise().sum().transpose();
    if (l == 0) break;
    MatrixT<T> d_input = delta * w.layers[l].weights;
    // Hidden layers are never softmax (validate_specs), so only ReLU needs a mask.
    if (w.layers[l - 1].spec.activation == Activation::ReLU)
      d_input = d_input.cwiseProduct((cache.post[l - 1].array() > T(0)).matrix().template cast<T>());
    delta = std::move(d_input);
  }
  return g;
}

template <class T>
void apply_sgd(BasicWeightSet<T>& w, const Gradient<T>& g, double learning_rate) {
  const T lr = static_cast<T>(learning_rate);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    w.layers[l].weights.noalias() -= lr * g.weights[l];
    w.layers[l].bias.noalias() -= lr * g.bias[l];
  }
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 5;
  double learning_rate = 0.02;
  std::size_t batch_size = 20;
  std::uint64_t seed = 0;
};

template <class T>
struct TrainResult {
  BasicWeightSet<T> weights;
  std::vector<double> epoch_losses;  // sample-weighted mean loss of each epoch
};

template <class T>
MatrixT<T> gather_rows(const MatrixT<T>& src, std::span<const std::size_t> rows) {
  MatrixT<T> out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = src.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

/// Mini-batch SGD on cross-entropy. The input weights are left untouched.
/// Each epoch reshuffles with a permutation seeded from (cfg.seed, epoch).
template <class T>
TrainResult<T> train_with_history(const BasicWeightSet<T>& initial, const MatrixT<T>& samples,
                                  std::span<const int> labels, const TrainConfig& cfg) {
  require(cfg.batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
  require(std::isfinite(cfg.learning_rate) && cfg.learning_rate >= 0.0, ErrorKind::Config,
          "learning rate must be finite and non-negative");
  require(static_cast<std::size_t>(samples.rows()) == labels.size(), ErrorKind::Shape,
          "sample and label counts differ");
  TrainResult<T> result{initial, {}};
  const auto m = static_cast<std::size_t>(samples.rows());
  if (m == 0) return result;

  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : batch_plan(m, cfg.batch_size, derive_seed(cfg.seed, "epoch", {epoch}))) {
      const MatrixT<T> x = gather_rows(samples, idx);
      batch_labels.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) batch_labels[i] = labels[idx[i]];
      const auto g = gradient(result.weights, x, LossTarget<T>::cross_entropy(batch_labels));
      if (!std::isfinite(g.loss)) throw DivergenceError(epoch, "non-finite training loss");
      total += g.loss * static_cast<double>(idx.size());
      apply_sgd(result.weights, g, cfg.learning_rate);
    }
    result.epoch_losses.push_back(total / static_cast<double>(m));
  }
  if (!result.weights.all_finite()) throw DivergenceError(cfg.epochs, "non-finite weights after training");
  return result;
}

template <class T>
BasicWeightSet<T> train(const BasicWeightSet<T>& initial, const MatrixT<T>& samples, std::span<const int> labels,
                        const TrainConfig& cfg) {
  return train_with_history(initial, samples, labels, cfg).weights;
}

}  // namespace fednia
