#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fednia/nn.hpp"

namespace fednia {

template <class T>
struct BasicClientUpdate {
  std::size_t client_id = 0;
  std::size_t round = 0;
  BasicWeightSet<T> weights;
};

using ClientUpdate = BasicClientUpdate<float>;

enum class AggregatorKind { FedAvg, CoordinateMedian, TrimmedMean, ClippedNoisy };

struct AggregatorSpec {
  AggregatorKind kind = AggregatorKind::FedAvg;
  double trim_fraction = 0.1;
  double clip_norm = std::numeric_limits<double>::infinity();
  double noise_std = 0.0;

  void validate() const {
    if (kind == AggregatorKind::TrimmedMean)
      require(trim_fraction >= 0.0 && trim_fraction < 0.5, ErrorKind::Config, "trim_fraction must lie in [0, 0.5)");
    if (kind == AggregatorKind::ClippedNoisy) {
      require(clip_norm > 0.0, ErrorKind::Config, "clip_norm must be > 0");
      require(noise_std >= 0.0 && std::isfinite(noise_std), ErrorKind::Config, "noise_std must be finite and >= 0");
    }
  }

  std::string name() const {
    switch (kind) {
      case AggregatorKind::FedAvg: return "fedavg";
      case AggregatorKind::CoordinateMedian: return "median";
      case AggregatorKind::TrimmedMean: return "trimmed_mean";
      case AggregatorKind::ClippedNoisy: return "clipped_noisy";
    }
    return "unknown";
  }
};

inline AggregatorKind aggregator_kind_from_string(std::string_view s) {
  if (s == "fedavg") return AggregatorKind::FedAvg;
  if (s == "median") return AggregatorKind::CoordinateMedian;
  if (s == "trimmed_mean") return AggregatorKind::TrimmedMean;
  if (s == "clipped_noisy") return AggregatorKind::ClippedNoisy;
  fail(ErrorKind::Config, "unknown aggregator '" + std::string(s) + "'");
}

namespace detail {

/// Updates sorted by client id, validated to share one architecture.
template <class T>
std::vector<const BasicClientUpdate<T>*> ordered(std::span<const BasicClientUpdate<T>> updates) {
  require(!updates.empty(), ErrorKind::Aggregation, "no updates to aggregate");
  std::vector<const BasicClientUpdate<T>*> out;
  for (const auto& u : updates) out.push_back(&u);
  std::stable_sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
  for (auto* u : out)
    require(u->weights.same_architecture(out.front()->weights), ErrorKind::Aggregation,
            "client " + std::to_string(u->client_id) + " sent a mismatched architecture");
  return out;
}

/// Applies `reduce(values) -> double` to every parameter coordinate, where
/// values holds that coordinate from each update in client-id order.
template <class T, class Reduce>
BasicWeightSet<T> coordinatewise(const std::vector<const BasicClientUpdate<T>*>& ups, Reduce reduce) {
  BasicWeightSet<T> out = ups.front()->weights;
  std::vector<double> values(ups.size());
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    auto visit = [&](auto member) {
      auto& dst = out.layers[l].*member;
      for (Eigen::Index i = 0; i < dst.size(); ++i) {
        for (std::size_t k = 0; k < ups.size(); ++k)
          values[k] = static_cast<double>((ups[k]->weights.layers[l].*member).data()[i]);
        dst.data()[i] = static_cast<T>(reduce(values));
      }
    };
    visit(&BasicDenseLayer<T>::weights);
    visit(&BasicDenseLayer<T>::bias);
  }
  return out;
}

}  // namespace detail

/// Elementwise arithmetic mean, accumulated in double in client-id order.
template <class T>
BasicWeightSet<T> fedavg(std::span<const BasicClientUpdate<T>> updates) {
  const auto ups = detail::ordered(updates);
  if (ups.size() == 1) return ups.front()->weights;
  const double inv = 1.0 / static_cast<double>(ups.size());
  BasicWeightSet<T> out = ups.front()->weights;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(out.layers[l].weights.rows(), out.layers[l].weights.cols());
    Eigen::VectorXd b = Eigen::VectorXd::Zero(out.layers[l].bias.size());
    for (auto* u : ups) {
      w += u->weights.layers[l].weights.template cast<double>();
      b += u->weights.layers[l].bias.template cast<double>();
    }
    out.layers[l].weights = (w * inv).cast<T>();
    out.layers[l].bias = (b * inv).cast<T>();
  }
  return out;
}

template <class T>
BasicWeightSet<T> fedavg(const std::vector<BasicClientUpdate<T>>& updates) {
  return fedavg(std::span<const BasicClientUpdate<T>>(updates));
}

inline double median_of(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Number of values dropped from each end by the trimmed mean.
inline std::size_t trim_count(std::size_t n, double trim_fraction) {
  return static_cast<std::size_t>(std::ceil(trim_fraction * static_cast<double>(n) - 1e-9));
}

inline double trimmed_mean_of(std::vector<double>& v, double trim_fraction) {
  std::sort(v.begin(), v.end());
  const std::size_t t = trim_count(v.size(), trim_fraction);
  require(v.size() > 2 * t, ErrorKind::Config, "trimmed mean removes every value");
  double s = 0.0;
  for (std::size_t i = t; i < v.size() - t; ++i) s += v[i];
  return s / static_cast<double>(v.size() - 2 * t);
}

/// Baseline robust aggregators. `global` is the current global state (only
/// ClippedNoisy uses it); `seed` drives the Gaussian noise.
template <class T>
BasicWeightSet<T> aggregate_baseline(std::span<const BasicClientUpdate<T>> updates, const AggregatorSpec& spec,
                                     const BasicWeightSet<T>& global, std::uint64_t seed) {
  spec.validate();
  const auto ups = detail::ordered(updates);
  switch (spec.kind) {
    case AggregatorKind::FedAvg:
      return fedavg(updates);
    case AggregatorKind::CoordinateMedian: {
      std::vector<double> scratch;
      return detail::coordinatewise(ups, [&](const std::vector<double>& v) {
        scratch = v;
        return median_of(scratch);
      });
    }
    case AggregatorKind::TrimmedMean: {
      require(ups.size() > 2 * trim_count(ups.size(), spec.trim_fraction), ErrorKind::Config,
              "trim_fraction " + std::to_string(spec.trim_fraction) + " removes all " + std::to_string(ups.size()) +
                  " updates");
      std::vector<double> scratch;
      return detail::coordinatewise(ups, [&](const std::vector<double>& v) {
        scratch = v;
        return trimmed_mean_of(scratch, spec.trim_fraction);
      });
    }
    case AggregatorKind::ClippedNoisy: {
      require(global.same_architecture(ups.front()->weights), ErrorKind::Aggregation,
              "global state does not match the updates");
      // Per-update scale min(1, clip / ||delta||_2) over the full parameter vector.
      std::vector<double> scale;
      for (auto* u : ups) {
        double sq = 0.0;
        for (std::size_t l = 0; l < global.layers.size(); ++l) {
          sq += (u->weights.layers[l].weights.template cast<double>() - global.layers[l].weights.template cast<double>())
                    .squaredNorm();
          sq += (u->weights.layers[l].bias.template cast<double>() - global.layers[l].bias.template cast<double>())
                    .squaredNorm();
        }
        const double norm = std::sqrt(sq);
        scale.push_back(norm > spec.clip_norm ? spec.clip_norm / norm : 1.0);
      }
      Rng rng(derive_seed(seed, "clipped-noisy"));
      BasicWeightSet<T> out = global;
      const double inv = 1.0 / static_cast<double>(ups.size());
      for (std::size_t l = 0; l < out.layers.size(); ++l) {
        auto visit = [&](auto member) {
          auto& dst = out.layers[l].*member;
          const auto& g = global.layers[l].*member;
          for (Eigen::Index i = 0; i < dst.size(); ++i) {
            const double gi = static_cast<double>(g.data()[i]);
            double acc = 0.0;
            for (std::size_t k = 0; k < ups.size(); ++k)
              acc += scale[k] * (static_cast<double>((ups[k]->weights.layers[l].*member).data()[i]) - gi);
            double v = gi + acc * inv;
            if (spec.noise_std > 0.0) v += rng.normal(0.0, spec.noise_std);
            dst.data()[i] = static_cast<T>(v);
          }
        };
        visit(&BasicDenseLayer<T>::weights);
        visit(&BasicDenseLayer<T>::bias);
      }
      return out;
    }
  }
  return fedavg(updates);
}

}  // namespace fednia
