// dpfl: run experiments, sweep the benchmark matrix, record and replay
// participation traces, print summary tables.

#include <CLI11.hpp>
#include <iostream>

#include "dpfl/error.hpp"
#include "dpfl/harness.hpp"

namespace {

dpfl::ExperimentConfig load_with_seeds(const std::string& path,
                                       const std::vector<std::uint64_t>& extra_seeds) {
  dpfl::ExperimentConfig cfg = dpfl::load_config(path);
  cfg.seeds.insert(cfg.seeds.end(), extra_seeds.begin(), extra_seeds.end());
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator under dynamic client participation"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string config_path;
  std::string trace_path;
  std::string out_path;
  std::string report_dir;
  std::vector<std::uint64_t> extra_seeds;

  auto* run = app.add_subcommand("run", "Run one experiment cell for every seed");
  run->add_option("config", config_path, "Config file (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", extra_seeds, "Append a seed to the config's seed list");

  auto* matrix = app.add_subcommand("matrix", "Cross-product sweep over the matrix axes");
  matrix->add_option("config", config_path, "Config file (JSON)")->required()->check(CLI::ExistingFile);
  matrix->add_option("--seed", extra_seeds, "Append a seed to the config's seed list");

  auto* trace = app.add_subcommand("trace", "Record or replay participation traces");
  trace->require_subcommand(1);
  auto* record = trace->add_subcommand("record", "Record the first seed's participation trace");
  record->add_option("config", config_path, "Config file (JSON)")->required()->check(CLI::ExistingFile);
  record->add_option("--out", out_path, "Output trace CSV")->required();
  record->add_option("--seed", extra_seeds, "Append a seed to the config's seed list");
  auto* replay = trace->add_subcommand("replay", "Re-run a config with a recorded trace");
  replay->add_option("config", config_path, "Config file (JSON)")->required()->check(CLI::ExistingFile);
  replay->add_option("trace", trace_path, "Trace CSV")->required()->check(CLI::ExistingFile);
  replay->add_option("--seed", extra_seeds, "Append a seed to the config's seed list");

  auto* report = app.add_subcommand("report", "Print summary tables for an artifact directory");
  report->add_option("dir", report_dir, "Artifact directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto dir = dpfl::run_experiment(load_with_seeds(config_path, extra_seeds));
      std::cout << dir.string() << '\n';
    } else if (*matrix) {
      for (const auto& dir : dpfl::run_matrix(load_with_seeds(config_path, extra_seeds))) {
        std::cout << dir.string() << '\n';
      }
    } else if (*record) {
      const auto cfg = load_with_seeds(config_path, extra_seeds);
      const auto streams = dpfl::seed_streams(cfg.seeds.front());
      dpfl::save_trace(dpfl::record_trace(cfg.participation, cfg.num_clients, cfg.rounds,
                                          streams.participation),
                       out_path);
      std::cout << out_path << '\n';
    } else if (*replay) {
      const auto cfg = load_with_seeds(config_path, extra_seeds);
      const auto dir = dpfl::replay_experiment(cfg, dpfl::load_trace(trace_path));
      std::cout << dir.string() << '\n';
    } else if (*report) {
      std::cout << dpfl::report(report_dir);
    }
  } catch (const dpfl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const dpfl::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
