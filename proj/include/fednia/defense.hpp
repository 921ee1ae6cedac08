#pragma once

// Noise-induced activation analysis.
//
// Each round the server draws nu random inputs, runs them through the global
// state and every client update, and averages each model's per-layer
// activations over the noise batch. A sub-autoencoder (one encoder/decoder
// stack per model layer, joined at a shared code layer) is trained on the
// global state's per-sample activations. Clients whose averaged activations
// reconstruct badly are scored as anomalous and filtered against
// tau = mean(e) + lambda * sigma(e) before aggregation.

#include <chrono>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "fednia/aggregate.hpp"
#include "fednia/nn.hpp"
#include "fednia/report.hpp"

namespace fednia {

// ---------------------------------------------------------------------------
// Noise batches

struct NoiseDistribution {
  enum class Kind { Uniform01, Gaussian } kind = Kind::Uniform01;
  double mean = 0.0;
  double stddev = 1.0;
};

struct NoiseBatch {
  Matrix inputs;  // nu x n
  std::uint64_t seed = 0;
  NoiseDistribution distribution;
};

/// Fresh noise for a round; the stream is seeded from (seed, round).
inline NoiseBatch make_noise(std::size_t nu, std::size_t input_size, std::uint64_t seed, std::size_t round,
                             const NoiseDistribution& dist = {}) {
  require(nu >= 1, ErrorKind::Config, "nu must be >= 1");
  NoiseBatch z{Matrix(static_cast<Eigen::Index>(nu), static_cast<Eigen::Index>(input_size)), seed, dist};
  Rng rng(derive_seed(seed, "noise", {round}));
  for (Eigen::Index i = 0; i < z.inputs.size(); ++i)
    z.inputs.data()[i] = static_cast<float>(dist.kind == NoiseDistribution::Kind::Uniform01
                                                ? rng.uniform()
                                                : rng.normal(dist.mean, dist.stddev));
  return z;
}

// ---------------------------------------------------------------------------
// Probing

struct ProbeResult {
  std::vector<ActivationProfile> per_sample;
  ActivationProfile averaged;
};

inline ActivationProfile mean_profile(std::span<const ActivationProfile> profiles) {
  require(!profiles.empty(), ErrorKind::Shape, "cannot average zero profiles");
  ActivationProfile avg{std::vector<double>(profiles.front().size(), 0.0), profiles.front().layer_offsets};
  for (const auto& p : profiles) {
    require(p.size() == avg.size(), ErrorKind::Shape, "profile lengths differ");
    for (std::size_t i = 0; i < p.size(); ++i) avg.values[i] += p.values[i];
  }
  const double inv = 1.0 / static_cast<double>(profiles.size());
  for (double& v : avg.values) v *= inv;
  return avg;
}

template <class T>
ProbeResult probe(const BasicWeightSet<T>& w, const MatrixT<T>& noise) {
  auto fwd = forward(w, noise);
  ProbeResult r;
  r.averaged = mean_profile(fwd.profiles);
  r.per_sample = std::move(fwd.profiles);
  return r;
}

inline ProbeResult probe(const WeightSet& w, const NoiseBatch& z) { return probe(w, z.inputs); }

// ---------------------------------------------------------------------------
// Detector

/// Hidden widths of one sub-autoencoder half for a layer of size s:
/// ceil(s/2), ceil(s/4), and the code width ceil(s/8), each at least 1.
inline std::array<std::size_t, 3> encoder_widths(std::size_t s) {
  auto part = [s](std::size_t d) { return std::max<std::size_t>(1, (s + d - 1) / d); };
  return {part(2), part(4), part(8)};
}

/// Layer specs for the sub-network that reconstructs a layer of size s.
inline std::vector<LayerSpec> subnet_specs(std::size_t s) {
  const auto [h1, h2, code] = encoder_widths(s);
  return {{s, h1, Activation::ReLU},    {h1, h2, Activation::ReLU}, {h2, code, Activation::ReLU},
          {code, h2, Activation::ReLU}, {h2, h1, Activation::ReLU}, {h1, s, Activation::Identity}};
}

template <class T>
struct BasicDetectorNet {
  std::vector<Segment> segments;             // slice of the profile each sub-network consumes
  std::vector<BasicWeightSet<T>> subnets;    // encoder (3 layers) + decoder (3 layers)

  std::size_t input_size() const { return segments.empty() ? 0 : segments.back().start + segments.back().length; }

  std::size_t code_size() const {
    std::size_t n = 0;
    for (const auto& s : segments) n += encoder_widths(s.length)[2];
    return n;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : subnets) n += s.parameter_count();
    return n;
  }

  friend bool operator==(const BasicDetectorNet&, const BasicDetectorNet&) = default;
};

using DetectorNet = BasicDetectorNet<float>;

template <class T = float>
BasicDetectorNet<T> build_detector(std::span<const Segment> segments, std::uint64_t seed) {
  require(!segments.empty(), ErrorKind::Config, "detector needs at least one layer");
  BasicDetectorNet<T> det;
  det.segments.assign(segments.begin(), segments.end());
  for (std::size_t l = 0; l < segments.size(); ++l) {
    const auto specs = subnet_specs(segments[l].length);
    det.subnets.push_back(init_weights<T>(specs, derive_seed(seed, "detector", {l})));
  }
  return det;
}

/// Detector sized from the classifier it will watch.
template <class T = float>
BasicDetectorNet<T> build_detector(const WeightSet& model, std::uint64_t seed) {
  const auto segs = model.profile_segments();
  return build_detector<T>(segs, seed);
}

/// Average over layers of per-layer RMSE.
inline double layerwise_loss(const ActivationProfile& profile, const ActivationProfile& reconstruction) {
  require(profile.size() == reconstruction.size() && profile.layer_offsets == reconstruction.layer_offsets,
          ErrorKind::Shape, "profile and reconstruction layouts differ");
  require(!profile.layer_offsets.empty(), ErrorKind::Shape, "profile has no layers");
  double total = 0.0;
  for (const auto& s : profile.layer_offsets) {
    double sq = 0.0;
    for (std::size_t i = s.start; i < s.start + s.length; ++i) {
      const double d = profile.values[i] - reconstruction.values[i];
      sq += d * d;
    }
    total += std::sqrt(sq / static_cast<double>(s.length));
  }
  return total / static_cast<double>(profile.layer_offsets.size());
}

namespace detail {

template <class T>
MatrixT<T> slice_columns(const MatrixT<T>& m, const Segment& s) {
  return m.middleCols(static_cast<Eigen::Index>(s.start), static_cast<Eigen::Index>(s.length));
}

template <class T>
MatrixT<T> profiles_to_matrix(std::span<const ActivationProfile> profiles) {
  MatrixT<T> m(static_cast<Eigen::Index>(profiles.size()),
               static_cast<Eigen::Index>(profiles.empty() ? 0 : profiles.front().size()));
  for (std::size_t r = 0; r < profiles.size(); ++r)
    for (std::size_t c = 0; c < profiles[r].size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = static_cast<T>(profiles[r].values[c]);
  return m;
}

}  // namespace detail

/// AE(A) for a batch of profiles stored as rows.
template <class T>
MatrixT<T> reconstruct(const BasicDetectorNet<T>& det, const MatrixT<T>& inputs) {
  require(static_cast<std::size_t>(inputs.cols()) == det.input_size(), ErrorKind::Shape,
          "detector expects " + std::to_string(det.input_size()) + " activations, got " + std::to_string(inputs.cols()));
  MatrixT<T> out(inputs.rows(), inputs.cols());
  for (std::size_t l = 0; l < det.subnets.size(); ++l) {
    const auto& s = det.segments[l];
    out.middleCols(static_cast<Eigen::Index>(s.start), static_cast<Eigen::Index>(s.length)) =
        predict(det.subnets[l], detail::slice_columns(inputs, s));
  }
  return out;
}

template <class T>
ActivationProfile reconstruct(const BasicDetectorNet<T>& det, const ActivationProfile& profile) {
  const MatrixT<T> in = detail::profiles_to_matrix<T>(std::span<const ActivationProfile>(&profile, 1));
  const MatrixT<T> out = reconstruct(det, in);
  ActivationProfile rec{std::vector<double>(profile.size()), profile.layer_offsets};
  for (std::size_t i = 0; i < rec.size(); ++i) rec.values[i] = static_cast<double>(out(0, static_cast<Eigen::Index>(i)));
  return rec;
}

/// Mean over rows of the layerwise loss between each row and AE(row).
template <class T>
double detector_loss(const BasicDetectorNet<T>& det, const MatrixT<T>& inputs) {
  double total = 0.0;
  for (std::size_t l = 0; l < det.subnets.size(); ++l) {
    const MatrixT<T> x = detail::slice_columns(inputs, det.segments[l]);
    total += loss_value(det.subnets[l], x, LossTarget<T>::layerwise_rmse(x, {{0, det.segments[l].length}}));
  }
  return total / static_cast<double>(det.subnets.size());
}

/// Gradient of detector_loss, one entry per sub-network. Layers only interact
/// through the 1/L average, so each sub-network's gradient is its own RMSE
/// gradient scaled by 1/L.
template <class T>
std::vector<Gradient<T>> detector_gradient(const BasicDetectorNet<T>& det, const MatrixT<T>& inputs) {
  std::vector<Gradient<T>> grads;
  const T inv_layers = static_cast<T>(1.0 / static_cast<double>(det.subnets.size()));
  for (std::size_t l = 0; l < det.subnets.size(); ++l) {
    const MatrixT<T> x = detail::slice_columns(inputs, det.segments[l]);
    auto g = gradient(det.subnets[l], x, LossTarget<T>::layerwise_rmse(x, {{0, det.segments[l].length}}));
    for (auto& m : g.weights) m *= inv_layers;
    for (auto& b : g.bias) b *= inv_layers;
    g.loss *= static_cast<double>(inv_layers);
    grads.push_back(std::move(g));
  }
  return grads;
}

struct DefenseParams {
  enum class Direction { ExcludeAbove, ExcludeBelow };

  std::size_t nu = 100;
  std::size_t detector_epochs = 50;
  std::size_t detector_batch = 10;
  double detector_lr = 0.02;
  double lambda = 1.0;
  Direction filter_direction = Direction::ExcludeAbove;
  std::size_t min_survivors = 1;
  NoiseDistribution noise;
  bool warm_start = false;

  void validate() const {
    require(nu >= 1, ErrorKind::Config, "nu must be >= 1");
    require(detector_batch >= 1, ErrorKind::Config, "detector_batch must be >= 1");
    require(detector_lr >= 0.0 && std::isfinite(detector_lr), ErrorKind::Config, "detector_lr must be finite, >= 0");
    require(lambda >= 0.0 && std::isfinite(lambda), ErrorKind::Config, "lambda must be finite and >= 0");
    require(min_survivors >= 1, ErrorKind::Config, "min_survivors must be >= 1");
  }
};

template <class T>
struct DetectorTraining {
  BasicDetectorNet<T> detector;
  std::vector<double> epoch_losses;
};

/// Mini-batch SGD on the layerwise loss over the per-sample global profiles.
template <class T>
DetectorTraining<T> train_detector(const BasicDetectorNet<T>& initial, std::span<const ActivationProfile> profiles,
                                   const DefenseParams& params, std::uint64_t seed) {
  DetectorTraining<T> out{initial, {}};
  const MatrixT<T> all = detail::profiles_to_matrix<T>(profiles);
  require(static_cast<std::size_t>(all.cols()) == initial.input_size(), ErrorKind::Shape,
          "profiles do not match the detector input size");
  const auto m = static_cast<std::size_t>(all.rows());
  for (std::size_t epoch = 0; epoch < params.detector_epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : batch_plan(m, params.detector_batch, derive_seed(seed, "detector-epoch", {epoch}))) {
      const MatrixT<T> x = gather_rows(all, idx);
      const auto grads = detector_gradient(out.detector, x);
      double batch_loss = 0.0;
      for (std::size_t l = 0; l < grads.size(); ++l) {
        batch_loss += grads[l].loss;
        apply_sgd(out.detector.subnets[l], grads[l], params.detector_lr);
      }
      if (!std::isfinite(batch_loss)) throw Error(ErrorKind::Defense, "detector diverged at epoch " + std::to_string(epoch));
      total += batch_loss * static_cast<double>(idx.size());
    }
    out.epoch_losses.push_back(total / static_cast<double>(m));
  }
  return out;
}

/// e_i = sqrt(||A - AE(A)||^2 / (k + r)) over the whole concatenated profile.
inline double score(const ActivationProfile& averaged, const ActivationProfile& reconstruction,
                    std::size_t total_clients) {
  require(averaged.size() == reconstruction.size(), ErrorKind::Shape, "profile and reconstruction lengths differ");
  require(total_clients >= 1, ErrorKind::Config, "total_clients must be >= 1");
  double sq = 0.0;
  for (std::size_t i = 0; i < averaged.size(); ++i) {
    const double d = averaged.values[i] - reconstruction.values[i];
    sq += d * d;
  }
  return std::sqrt(sq / static_cast<double>(total_clients));
}

template <class T>
double score(const BasicDetectorNet<T>& det, const ActivationProfile& averaged, std::size_t total_clients) {
  return score(averaged, reconstruct(det, averaged), total_clients);
}

struct Threshold {
  double mean = 0.0;
  double sigma = 0.0;  // population standard deviation
  double tau = 0.0;
};

inline Threshold threshold_stats(std::span<const double> errors, double lambda) {
  require(!errors.empty(), ErrorKind::Defense, "threshold needs at least one error");
  const double n = static_cast<double>(errors.size());
  double sum = 0.0;
  for (double e : errors) sum += e;
  const double mean = sum / n;
  double var = 0.0;
  for (double e : errors) var += (e - mean) * (e - mean);
  const double sigma = std::sqrt(var / n);
  return {mean, sigma, mean + lambda * sigma};
}

inline double threshold(std::span<const double> errors, double lambda) { return threshold_stats(errors, lambda).tau; }

struct FilterResult {
  std::vector<std::size_t> survivors;  // positions into the errors list
  bool fallback = false;
};

/// ExcludeAbove keeps e_i <= tau. ExcludeBelow keeps e_i >= tau.
/// Keeps everyone (and flags it) if fewer than min_survivors remain.
inline FilterResult filter(std::span<const double> errors, double tau, DefenseParams::Direction direction,
                           std::size_t min_survivors) {
  FilterResult r;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    const bool keep = direction == DefenseParams::Direction::ExcludeAbove ? errors[i] <= tau : errors[i] >= tau;
    if (keep) r.survivors.push_back(i);
  }
  if (r.survivors.size() < min_survivors) {
    r.fallback = true;
    r.survivors.clear();
    for (std::size_t i = 0; i < errors.size(); ++i) r.survivors.push_back(i);
  }
  return r;
}

struct DefenseOutcome {
  std::vector<std::size_t> survivors;  // client ids, ascending
  RoundReport report;
  std::optional<DetectorNet> detector;
  // Averaged profiles, global first then clients in client-id order.
  std::vector<ActivationProfile> averaged_profiles;
};

/// One full defense pass. Never modifies `global` or `updates`. `warm`, when
/// given, seeds the detector instead of a fresh initialisation.
inline DefenseOutcome defend(const WeightSet& global, std::span<const ClientUpdate> updates,
                             const DefenseParams& params, std::uint64_t round_seed, std::size_t round = 0,
                             std::size_t threads = 1, const DetectorNet* warm = nullptr) {
  params.validate();
  require(!updates.empty(), ErrorKind::Defense, "defend needs at least one update");
  for (const auto& u : updates)
    require(u.weights.same_architecture(global), ErrorKind::Shape,
            "client " + std::to_string(u.client_id) + " does not match the global architecture");

  std::vector<const ClientUpdate*> ordered;
  for (const auto& u : updates) ordered.push_back(&u);
  std::stable_sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });

  DefenseOutcome out;
  auto& rep = out.report;
  rep.round = round;
  rep.defended = true;

  const auto z = make_noise(params.nu, global.input_size(), round_seed, round, params.noise);
  auto global_probe = probe(global, z);

  std::vector<ActivationProfile> client_avg(ordered.size());
  parallel_for(ordered.size(), threads, [&](std::size_t i) { client_avg[i] = probe(ordered[i]->weights, z).averaged; });

  const auto segments = global.profile_segments();
  DetectorNet initial =
      warm && warm->segments == segments ? *warm : build_detector<float>(segments, derive_seed(round_seed, "detector-init", {round}));

  std::vector<std::size_t> all_ids;
  for (auto* u : ordered) all_ids.push_back(u->client_id);

  std::optional<DetectorTraining<float>> trained;
  try {
    trained = train_detector(initial, global_probe.per_sample, params, derive_seed(round_seed, "detector-train", {round}));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Defense) throw;
  }

  if (!trained) {
    rep.fallback = FilterFallback::DetectorDiverged;
    out.survivors = all_ids;
    rep.survivors = all_ids;
    return out;
  }

  rep.detector_loss_curve = trained->epoch_losses;
  rep.detector_final_loss = trained->epoch_losses.empty() ? detector_loss(trained->detector, detail::profiles_to_matrix<float>(global_probe.per_sample))
                                                          : trained->epoch_losses.back();

  std::vector<double> errors(ordered.size());
  parallel_for(ordered.size(), threads,
               [&](std::size_t i) { errors[i] = score(trained->detector, client_avg[i], ordered.size()); });
  bool finite = true;
  for (double e : errors) finite = finite && std::isfinite(e);
  if (!finite) {
    rep.fallback = FilterFallback::DetectorDiverged;
    out.survivors = all_ids;
    rep.survivors = all_ids;
    return out;
  }

  const auto th = threshold_stats(errors, params.lambda);
  rep.mean_error = th.mean;
  rep.sigma = th.sigma;
  rep.tau = th.tau;
  for (std::size_t i = 0; i < errors.size(); ++i) rep.errors.emplace_back(all_ids[i], errors[i]);

  const auto kept = filter(errors, th.tau, params.filter_direction, params.min_survivors);
  if (kept.fallback) rep.fallback = FilterFallback::MinSurvivors;
  std::vector<bool> keep(errors.size(), false);
  for (std::size_t i : kept.survivors) keep[i] = true;
  for (std::size_t i = 0; i < errors.size(); ++i) (keep[i] ? rep.survivors : rep.rejected).push_back(all_ids[i]);
  out.survivors = rep.survivors;

  out.averaged_profiles.push_back(global_probe.averaged);
  for (auto& p : client_avg) out.averaged_profiles.push_back(std::move(p));
  out.detector = std::move(trained->detector);
  return out;
}

}  // namespace fednia
