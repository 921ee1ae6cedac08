#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "fednia/aggregate.hpp"
#include "fednia/attacks.hpp"
#include "fednia/data.hpp"
#include "fednia/defense.hpp"
#include "fednia/nn.hpp"

namespace fednia {

struct FederationConfig {
  std::size_t num_benign = 20;     // k
  std::size_t num_malicious = 0;   // r
  std::size_t rounds = 50;         // T
  std::size_t local_epochs = 5;
  double local_lr = 0.02;
  double global_lr = 1.0;
  std::size_t batch_size = 20;
  std::uint64_t seed = 0;

  std::size_t total_clients() const { return num_benign + num_malicious; }
  double delta() const { return static_cast<double>(num_malicious) / static_cast<double>(total_clients()); }

  void validate() const {
    require(num_benign >= 1, ErrorKind::Config, "num_benign must be >= 1");
    require(2 * num_malicious < total_clients(), ErrorKind::Config,
            "num_malicious must be a strict minority (r < (k + r) / 2)");
    require(rounds >= 1, ErrorKind::Config, "rounds must be >= 1");
    require(batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
    require(local_lr >= 0.0 && std::isfinite(local_lr), ErrorKind::Config, "local_lr must be finite and >= 0");
    require(global_lr > 0.0 && std::isfinite(global_lr), ErrorKind::Config, "global_lr must be finite and > 0");
  }
};

struct ClientRoundResult {
  ClientUpdate update;
  double final_loss = 0.0;  // mean loss of the last local epoch (0 when no epochs ran)
};

/// Local training from the global state. Malicious clients poison their data
/// first. All randomness comes from (cfg.seed, client_id, round).
inline ClientRoundResult client_round(const WeightSet& global, const LabeledDataset& local, const FederationConfig& cfg,
                                      const AttackSpec* attack, std::size_t client_id, std::size_t round) {
  const LabeledDataset poisoned = attack ? apply_attack(local, *attack) : LabeledDataset{};
  const LabeledDataset& data = attack ? poisoned : local;
  const TrainConfig tc{cfg.local_epochs, cfg.local_lr, cfg.batch_size,
                       derive_seed(cfg.seed, "client-train", {client_id, round})};
  try {
    auto res = train_with_history(global, data.samples, data.labels, tc);
    const double loss = res.epoch_losses.empty() ? 0.0 : res.epoch_losses.back();
    return {{client_id, round, std::move(res.weights)}, loss};
  } catch (const DivergenceError& e) {
    throw DivergenceError(e.epoch(), "client " + std::to_string(client_id) + ": " + e.what());
  }
}

/// W_G + global_lr * (aggregate - W_G); global_lr = 1 replaces the state.
inline WeightSet apply_global_update(const WeightSet& global, WeightSet aggregate, double global_lr) {
  if (global_lr == 1.0) return aggregate;
  const float lr = static_cast<float>(global_lr);
  for (std::size_t l = 0; l < aggregate.layers.size(); ++l) {
    aggregate.layers[l].weights = global.layers[l].weights + lr * (aggregate.layers[l].weights - global.layers[l].weights);
    aggregate.layers[l].bias = global.layers[l].bias + lr * (aggregate.layers[l].bias - global.layers[l].bias);
  }
  return aggregate;
}

/// Filters updates for one round. The engine only needs the survivor ids and
/// the telemetry; see defend() for the noise-activation implementation.
using DefenseFn = std::function<DefenseOutcome(const WeightSet& global, std::span<const ClientUpdate> updates,
                                               std::size_t round)>;

inline DefenseFn fednia_defense(const DefenseParams& params, std::uint64_t seed, std::size_t threads = 1) {
  // Warm start carries the previous round's detector; shared state lives in
  // the closure, so one DefenseFn must not serve two experiments.
  auto last = std::make_shared<std::optional<DetectorNet>>();
  return [params, seed, threads, last](const WeightSet& global, std::span<const ClientUpdate> updates,
                                        std::size_t round) {
    const DetectorNet* warm = params.warm_start && last->has_value() ? &**last : nullptr;
    auto out = defend(global, updates, params, seed, round, threads, warm);
    if (params.warm_start && out.detector) *last = *out.detector;
    return out;
  };
}

struct ServerStep {
  WeightSet global;
  RoundReport report;
  std::vector<ActivationProfile> profiles;  // filled when the defense ran
};

/// Defense (when present) followed by aggregation of the survivors.
inline ServerStep server_step(const WeightSet& global, std::span<const ClientUpdate> updates, std::size_t round,
                              const AggregatorSpec& aggregator, double global_lr, const DefenseFn* defense,
                              std::uint64_t seed) {
  require(!updates.empty(), ErrorKind::Aggregation, "round received no updates");
  ServerStep step;
  std::vector<ClientUpdate> kept;
  if (defense && *defense) {
    auto outcome = (*defense)(global, updates, round);
    step.report = std::move(outcome.report);
    step.profiles = std::move(outcome.averaged_profiles);
    std::set<std::size_t> ids(outcome.survivors.begin(), outcome.survivors.end());
    for (const auto& u : updates)
      if (ids.contains(u.client_id)) kept.push_back(u);
    require(!kept.empty(), ErrorKind::Aggregation, "defense left no updates to aggregate");
  } else {
    kept.assign(updates.begin(), updates.end());
    for (const auto& u : updates) step.report.survivors.push_back(u.client_id);
    std::sort(step.report.survivors.begin(), step.report.survivors.end());
  }
  step.report.round = round;
  auto agg = aggregate_baseline(std::span<const ClientUpdate>(kept), aggregator, global,
                                derive_seed(seed, "aggregate", {round}));
  step.global = apply_global_update(global, std::move(agg), global_lr);
  return step;
}

struct Client {
  std::size_t id = 0;
  const LabeledDataset* data = nullptr;
  std::optional<AttackSpec> attack;  // present for malicious clients
};

struct RoundResult {
  WeightSet global;
  RoundReport report;
  std::vector<ClientUpdate> updates;
  std::vector<ActivationProfile> profiles;
};

/// One federated round: every client trains (in parallel when threads > 1),
/// then the server filters and aggregates.
inline RoundResult run_round(const WeightSet& state, std::size_t round, std::span<const Client> clients,
                             const FederationConfig& cfg, const AggregatorSpec& aggregator, const DefenseFn* defense,
                             std::size_t threads = 1) {
  require(!clients.empty(), ErrorKind::Config, "round has no clients");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<ClientRoundResult> results(clients.size());
  parallel_for(clients.size(), threads, [&](std::size_t i) {
    const auto& c = clients[i];
    results[i] = client_round(state, *c.data, cfg, c.attack ? &*c.attack : nullptr, c.id, round);
  });

  RoundResult out;
  double loss = 0.0;
  for (auto& r : results) {
    loss += r.final_loss;
    out.updates.push_back(std::move(r.update));
  }
  auto step = server_step(state, out.updates, round, aggregator, cfg.global_lr, defense, cfg.seed);
  out.global = std::move(step.global);
  out.report = std::move(step.report);
  out.profiles = std::move(step.profiles);
  out.report.train_loss = loss / static_cast<double>(clients.size());
  for (const auto& c : clients)
    if (c.attack) out.report.ground_truth_malicious.insert(c.id);
  out.report.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace fednia
