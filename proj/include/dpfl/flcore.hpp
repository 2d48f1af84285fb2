#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpfl/datagen.hpp"
#include "dpfl/numkit.hpp"
#include "dpfl/participation.hpp"
#include "dpfl/rng.hpp"

namespace dpfl {

enum class StrategyKind { fedavg, fedprox, scaffold };

StrategyKind parse_strategy(std::string_view name);
std::string_view to_string(StrategyKind kind);

/// Where a client starts local training when it is active.
enum class WarmStart { global, stale_local };

struct StrategyConfig {
  StrategyKind kind = StrategyKind::fedavg;
  double prox_mu = 0.01;
  std::size_t local_epochs = 5;
  SgdConfig sgd;
  WarmStart warm_start = WarmStart::global;

  void validate() const;
};

struct ClientState {
  std::size_t id = 0;
  std::vector<std::size_t> indices;
  std::vector<std::size_t> counts;
  /// SCAFFOLD control variate c_i; empty for other strategies.
  Vector control;
  std::optional<MlpModel> last_local;
};

struct ClientUpdate {
  std::size_t client_id = 0;
  MlpModel model;
  /// Strategy payload z_i (SCAFFOLD: updated control variate).
  Vector aux;
  std::size_t sample_count = 0;
  std::size_t local_steps = 0;
  std::size_t batch_size = 0;
  double mean_loss = 0.0;
};

/// E epochs of minibatch SGD on the client's shard starting from `global`
/// (or the client's stale local model under WarmStart::stale_local).
/// FedProx adds mu * (theta - global) to every gradient; SCAFFOLD adds
/// (c - c_i) and returns the option-II control variate
/// c_i+ = c_i - c + (global - theta_K) / (K * lr).
ClientUpdate local_update(const ClientState& client, const Dataset& data, const MlpModel& global,
                          const Vector& global_aux, const StrategyConfig& cfg, Rng rng);

/// Convex combination of equally sized vectors, summed in the given order.
/// Exactly uniform weights take a plain-mean path so callers that arrive at
/// uniform weights by different arithmetic produce identical bits.
Vector weighted_average(std::span<const Vector* const> items, std::span<const double> weights);

/// Sample-count weighted average of client models (explicit weights when
/// given). Throws EmptyRoundError on an empty batch.
MlpModel aggregate(std::span<const ClientUpdate> updates, std::span<const double> weights = {});

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::size_t> active_ids;
  double psi = 0.0;
  double wall_seconds = 0.0;
  std::map<std::string, double> diagnostics;
};

struct RoundContext {
  std::size_t round = 0;
  std::span<const std::size_t> active_ids;
  const Dataset* data = nullptr;
  const Partition* partition = nullptr;
};

struct AggregateOverride {
  MlpModel theta;
  Vector aux;
};

/// Server-side extension point. Base strategies are left untouched: a plugin
/// may replace aggregation before it happens and replace the aggregated model
/// after it.
class RoundPlugin {
 public:
  virtual ~RoundPlugin() = default;

  /// Called every round, including empty ones (with no updates). A returned
  /// value replaces the base aggregation result.
  virtual std::optional<AggregateOverride> before_aggregation(
      const RoundContext& ctx, std::span<const ClientUpdate> updates) = 0;

  /// Called after aggregation on non-empty rounds. A returned model replaces
  /// the global model for evaluation and the next round.
  virtual std::optional<MlpModel> after_aggregation(const RoundContext& ctx,
                                                    const MlpModel& theta) = 0;

  virtual void add_diagnostics(std::map<std::string, double>& out) const { (void)out; }
};

struct RunSettings {
  StrategyConfig strategy;
  std::vector<std::size_t> hidden{64};
  std::size_t workers = 1;
};

/// Server coordinator for one experiment: owns Theta, client states and the
/// participation scheduler, and produces one RoundRecord per round.
class FederatedRun {
 public:
  FederatedRun(const Dataset& data, const Partition& partition, RunSettings settings,
               ParticipationScheduler scheduler, Rng training_rng, RoundPlugin* plugin = nullptr);

  const RoundRecord& run_round();
  void run(std::size_t rounds);

  const MlpModel& global_model() const noexcept { return global_; }
  const Vector& global_aux() const noexcept { return global_aux_; }
  const std::vector<RoundRecord>& records() const noexcept { return records_; }
  const std::vector<ClientState>& clients() const noexcept { return clients_; }
  /// Raw participation samples (before zero-sample clients are dropped).
  const ParticipationTrace& sampled_trace() const noexcept { return sampled_; }
  std::size_t round() const noexcept { return records_.size(); }

 private:
  std::vector<ClientUpdate> train_active(std::size_t t, std::span<const std::size_t> active);

  const Dataset& data_;
  const Partition& partition_;
  RunSettings settings_;
  ParticipationScheduler scheduler_;
  Rng rng_;
  RoundPlugin* plugin_;
  MlpModel global_;
  Vector global_aux_;
  std::vector<ClientState> clients_;
  std::vector<RoundRecord> records_;
  ParticipationTrace sampled_;
  double last_psi_theta_ = 0.0;
};

}  // namespace dpfl
