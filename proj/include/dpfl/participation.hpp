#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dpfl/rng.hpp"

namespace dpfl {

/// Boolean round x client activity matrix.
struct ParticipationTrace {
  std::size_t num_clients = 0;
  std::vector<std::vector<std::uint8_t>> active;  // [round][client]

  std::size_t rounds() const noexcept { return active.size(); }
  bool operator==(const ParticipationTrace&) const = default;
};

struct StaticParticipation {};

/// One piece of a piecewise-constant joining-probability schedule. `probs`
/// holds either a single shared probability or one per client.
struct ProbabilityPhase {
  std::size_t start_round = 0;
  std::vector<double> probs;
};

struct TimedRandom {
  std::vector<ProbabilityPhase> phases{{0, {0.5}}};

  double probability(std::size_t client, std::size_t round) const;
};

enum class MarkovInit { stationary, all_active };

/// Two-state on/off chain; state 0 = inactive, 1 = active.
/// transition[a][b] = P(next = b | current = a).
struct Markovian {
  std::array<std::array<double, 2>, 2> transition{{{0.8, 0.2}, {0.2, 0.8}}};
  MarkovInit initial = MarkovInit::stationary;
};

struct Programmed {
  ParticipationTrace trace;
};

using ParticipationModel = std::variant<StaticParticipation, TimedRandom, Markovian, Programmed>;

void validate(const ParticipationModel& model, std::size_t num_clients);
std::string_view kind_name(const ParticipationModel& model);

/// Per-client chain states (Markovian only; empty otherwise).
struct ParticipationState {
  std::vector<std::uint8_t> markov;
  bool initialized = false;
};

struct RoundSample {
  std::vector<std::size_t> active;  // ascending client ids
  ParticipationState state;
};

/// C_t for round t. A pure function of its arguments; `rng` is the stream
/// dedicated to this round.
RoundSample sample_round(const ParticipationModel& model, std::size_t num_clients, std::size_t t,
                         const ParticipationState& state, Rng rng);

/// Owns the per-client state and hands out one labeled rng stream per round.
class ParticipationScheduler {
 public:
  ParticipationScheduler(ParticipationModel model, std::size_t num_clients, Rng rng);

  std::vector<std::size_t> next(std::size_t t);
  const ParticipationModel& model() const noexcept { return model_; }
  std::size_t num_clients() const noexcept { return num_clients_; }

 private:
  ParticipationModel model_;
  std::size_t num_clients_;
  ParticipationState state_;
  Rng rng_;
};

struct StationaryResult {
  double inactive = 0.5;
  double active = 0.5;
  bool degenerate = false;  // no unique stationary distribution
  bool periodic = false;
};

StationaryResult stationary_distribution(const std::array<std::array<double, 2>, 2>& transition);

/// Rolls the model forward for `rounds` rounds and records the active sets.
ParticipationTrace record_trace(const ParticipationModel& model, std::size_t num_clients,
                                std::size_t rounds, Rng rng);

/// CSV: header `# clients=N rounds=R`, then one row of N comma-separated 0/1
/// values per round.
std::string trace_to_csv(const ParticipationTrace& trace);
ParticipationTrace trace_from_csv(std::string_view text);
void save_trace(const ParticipationTrace& trace, const std::filesystem::path& path);
ParticipationTrace load_trace(const std::filesystem::path& path);

}  // namespace dpfl
