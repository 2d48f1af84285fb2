#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dpfl/datagen.hpp"
#include "dpfl/flcore.hpp"
#include "dpfl/kpfl.hpp"
#include "dpfl/participation.hpp"

namespace dpfl {

/// Environment variable that replaces the configured output root.
inline constexpr const char* kOutputRootEnv = "DPFL_OUTPUT_ROOT";

struct HeterogeneitySpec {
  std::string label = "heavy_niid";
  double alpha = 0.1;
};

/// Sweep axes for `matrix`. Empty axes fall back to the base config value.
struct MatrixSpec {
  std::vector<std::string> strategies;
  std::vector<std::string> participation;
  std::vector<std::string> heterogeneity;
  std::vector<bool> kpfl;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  std::vector<std::size_t> hidden{64};
  std::size_t num_clients = 10;
  HeterogeneitySpec heterogeneity;
  ParticipationModel participation = StaticParticipation{};
  /// Parameters reused when the matrix names a participation type.
  TimedRandom timed_random;
  Markovian markovian;
  StrategyConfig strategy;
  std::optional<KpflConfig> kpfl;
  /// KPFL settings used when the matrix switches KPFL on.
  KpflConfig kpfl_defaults;
  std::size_t rounds = 100;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::filesystem::path output_dir = "runs";
  bool paired_static = true;
  std::size_t window = 5;
  std::size_t workers = 1;
  bool pool_snapshots = true;
  std::optional<MatrixSpec> matrix;

  void validate() const;
};

/// Parses the JSON config format documented in the README. Relative paths
/// (programmed traces) resolve against `base_dir`. Every error is a
/// ConfigError raised before any compute.
ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& cfg);

ParticipationModel parse_participation_name(std::string_view name, const ExperimentConfig& cfg);

/// Output root after the environment override.
std::filesystem::path output_root(const ExperimentConfig& cfg);

/// Labeled seed streams. Changing one never perturbs the others.
struct SeedStreams {
  Rng data;
  Rng participation;
  Rng training;
  Rng kpfl;
};
SeedStreams seed_streams(std::uint64_t seed);

struct SeedOutcome {
  std::uint64_t seed = 0;
  Partition partition;
  std::vector<RoundRecord> records;
  ParticipationTrace trace;
  std::vector<std::string> pool_snapshots;
  double seconds = 0.0;

  std::vector<double> psi() const;
  std::vector<double> diagnostic(std::string_view key) const;
};

/// One dataset + partition + participation + strategy run for one seed.
SeedOutcome simulate(const ExperimentConfig& cfg, std::uint64_t seed);

struct SeedSummary {
  std::uint64_t seed = 0;
  std::size_t rounds = 0;
  std::size_t window = 0;
  std::optional<double> we_final;
  std::optional<double> idp;
  std::optional<double> id_full;
  std::optional<double> id_second_half;
  std::vector<double> psi;
  std::optional<double> we_final_theta;
  std::vector<double> psi_theta;
};

/// WE over the last `window` rounds, IDP against `static_psi` when given,
/// ID over the full run and over its second half.
SeedSummary summarize(std::uint64_t seed, const std::vector<double>& psi,
                      const std::vector<double>* static_psi, std::size_t window,
                      const std::vector<double>* psi_theta = nullptr);

std::string summary_json(const SeedSummary& s);
/// `t,active_ids,psi,<diagnostic columns>`; timing is kept out so the file
/// is byte-reproducible.
std::string rounds_csv(const std::vector<RoundRecord>& records);
std::string timing_csv(const std::vector<RoundRecord>& records);

/// Runs every seed of a single cell and writes its artifact directory.
/// Returns the cell directory.
std::filesystem::path run_experiment(const ExperimentConfig& cfg);

/// Cross product over the matrix axes; one artifact directory per cell.
std::vector<std::filesystem::path> run_matrix(const ExperimentConfig& cfg);

/// Re-runs `cfg` with participation replayed from a recorded trace.
std::filesystem::path replay_experiment(ExperimentConfig cfg, const ParticipationTrace& trace,
                                        std::string_view name_suffix = "_replay");

/// Summary tables (rows = metric x participation, columns = strategy +/-
/// KPFL). A pure function of the directory contents.
std::string report(const std::filesystem::path& dir);

}  // namespace dpfl
