#include "dpfl/harness.hpp"

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "dpfl/error.hpp"
#include "dpfl/io.hpp"
#include "dpfl/metrics.hpp"

namespace dpfl {

using json = nlohmann::json;

namespace {

/// Read-only view of a JSON object that rejects unknown keys.
class Fields {
 public:
  Fields(const json& obj, std::string context) : obj_(obj), context_(std::move(context)) {
    if (!obj_.is_object()) throw ConfigError(context_ + ": expected an object");
  }

  void allow(std::initializer_list<const char*> keys) const {
    std::set<std::string> known(keys.begin(), keys.end());
    for (const auto& [k, v] : obj_.items()) {
      if (!known.count(k)) throw ConfigError(context_ + ": unknown key '" + k + "'");
    }
  }

  bool has(const char* key) const { return obj_.contains(key) && !obj_.at(key).is_null(); }
  const json& at(const char* key) const { return obj_.at(key); }

  template <typename T>
  void read(const char* key, T& out) const {
    if (!has(key)) return;
    check_kind<T>(obj_.at(key), key);
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(context_ + "." + key + ": " + e.what());
    }
  }

 private:
  template <typename T>
  void check_kind(const json& v, const char* key) const {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(context_ + "." + key + ": expected true or false");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) {
        throw ConfigError(context_ + "." + key + ": expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(context_ + "." + key + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(context_ + "." + key + ": expected a string");
    } else if constexpr (requires { typename T::value_type; }) {
      if (!v.is_array()) throw ConfigError(context_ + "." + key + ": expected a list");
      for (const auto& item : v) check_kind<typename T::value_type>(item, key);
    }
  }

  const json& obj_;
  std::string context_;
};

SgdConfig parse_sgd_fields(const Fields& f, SgdConfig base, const char* lr, const char* momentum,
                           const char* wd) {
  f.read(lr, base.learning_rate);
  f.read(momentum, base.momentum);
  f.read(wd, base.weight_decay);
  return base;
}

StrategyConfig parse_strategy_json(const json& j, StrategyConfig s) {
  if (j.is_string()) {
    s.kind = parse_strategy(j.get<std::string>());
    return s;
  }
  Fields f(j, "strategy");
  f.allow({"name", "prox_mu", "local_epochs", "lr", "momentum", "weight_decay", "batch_size",
           "warm_start"});
  std::string name = std::string(to_string(s.kind));
  f.read("name", name);
  s.kind = parse_strategy(name);
  f.read("prox_mu", s.prox_mu);
  f.read("local_epochs", s.local_epochs);
  s.sgd = parse_sgd_fields(f, s.sgd, "lr", "momentum", "weight_decay");
  f.read("batch_size", s.sgd.batch_size);
  std::string warm = s.warm_start == WarmStart::global ? "global" : "stale_local";
  f.read("warm_start", warm);
  if (warm == "global") {
    s.warm_start = WarmStart::global;
  } else if (warm == "stale_local") {
    s.warm_start = WarmStart::stale_local;
  } else {
    throw ConfigError("strategy.warm_start: expected 'global' or 'stale_local'");
  }
  return s;
}

KpflConfig parse_kpfl_json(const json& j, KpflConfig k) {
  Fields f(j, "kpfl");
  f.allow({"lambda_aa", "lambda_ia", "gamma_ce", "gamma_ctr", "gamma_div", "tau_temp", "generator",
           "generator_steps", "distill_steps", "batch", "generator_lr", "generator_momentum",
           "distill_lr", "distill_momentum", "distill_weight_decay", "distill_temperature"});
  f.read("lambda_aa", k.lambda_aa);
  f.read("lambda_ia", k.lambda_ia);
  f.read("gamma_ce", k.gamma_ce);
  f.read("gamma_ctr", k.gamma_ctr);
  f.read("gamma_div", k.gamma_div);
  f.read("tau_temp", k.tau_temp);
  f.read("generator_steps", k.generator_steps);
  f.read("distill_steps", k.distill_steps);
  f.read("batch", k.batch);
  f.read("generator_lr", k.generator_sgd.learning_rate);
  f.read("generator_momentum", k.generator_sgd.momentum);
  f.read("distill_lr", k.distill_sgd.learning_rate);
  f.read("distill_momentum", k.distill_sgd.momentum);
  f.read("distill_weight_decay", k.distill_sgd.weight_decay);
  f.read("distill_temperature", k.distill_temperature);
  if (f.has("generator")) {
    Fields g(f.at("generator"), "kpfl.generator");
    g.allow({"latent_dim", "embedding_dim", "hidden"});
    g.read("latent_dim", k.generator.latent_dim);
    g.read("embedding_dim", k.generator.embedding_dim);
    g.read("hidden", k.generator.hidden);
  }
  return k;
}

ParticipationModel parse_participation_json(const json& j, ExperimentConfig& cfg,
                                            const std::filesystem::path& base_dir) {
  if (j.is_string()) return parse_participation_name(j.get<std::string>(), cfg);
  Fields f(j, "participation");
  std::string type;
  f.read("type", type);
  if (type == "static") {
    f.allow({"type"});
    return StaticParticipation{};
  }
  if (type == "timed_random") {
    f.allow({"type", "probability", "probabilities", "phases"});
    TimedRandom m;
    if (f.has("phases")) {
      m.phases.clear();
      for (const auto& p : f.at("phases")) {
        Fields pf(p, "participation.phases[]");
        pf.allow({"start", "probs"});
        ProbabilityPhase phase;
        pf.read("start", phase.start_round);
        pf.read("probs", phase.probs);
        m.phases.push_back(std::move(phase));
      }
    } else if (f.has("probabilities")) {
      m.phases = {{0, {}}};
      f.read("probabilities", m.phases[0].probs);
    } else {
      double p = 0.5;
      f.read("probability", p);
      m.phases = {{0, {p}}};
    }
    cfg.timed_random = m;
    return m;
  }
  if (type == "markovian") {
    f.allow({"type", "matrix", "initial"});
    Markovian m;
    if (f.has("matrix")) {
      std::vector<std::vector<double>> rows;
      f.read("matrix", rows);
      if (rows.size() != 2 || rows[0].size() != 2 || rows[1].size() != 2) {
        throw ConfigError("participation.matrix must be 2x2");
      }
      m.transition = {{{rows[0][0], rows[0][1]}, {rows[1][0], rows[1][1]}}};
    }
    std::string init = "stationary";
    f.read("initial", init);
    if (init == "stationary") {
      m.initial = MarkovInit::stationary;
    } else if (init == "all_active") {
      m.initial = MarkovInit::all_active;
    } else {
      throw ConfigError("participation.initial: expected 'stationary' or 'all_active'");
    }
    cfg.markovian = m;
    return m;
  }
  if (type == "programmed") {
    f.allow({"type", "trace"});
    std::string path;
    f.read("trace", path);
    if (path.empty()) throw ConfigError("participation.trace: path required for programmed");
    std::filesystem::path p(path);
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    try {
      return Programmed{load_trace(p)};
    } catch (const Error& e) {
      throw ConfigError(std::string("participation.trace: ") + e.what());
    }
  }
  throw ConfigError("participation.type: unknown '" + type + "'");
}

json participation_to_json(const ParticipationModel& m) {
  return std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, StaticParticipation>) {
          return {{"type", "static"}};
        } else if constexpr (std::is_same_v<T, TimedRandom>) {
          json phases = json::array();
          for (const auto& p : v.phases) phases.push_back({{"start", p.start_round}, {"probs", p.probs}});
          return {{"type", "timed_random"}, {"phases", phases}};
        } else if constexpr (std::is_same_v<T, Markovian>) {
          return {{"type", "markovian"},
                  {"matrix", {{v.transition[0][0], v.transition[0][1]},
                              {v.transition[1][0], v.transition[1][1]}}},
                  {"initial", v.initial == MarkovInit::stationary ? "stationary" : "all_active"}};
        } else {
          return {{"type", "programmed"},
                  {"clients", v.trace.num_clients},
                  {"rounds", v.trace.rounds()}};
        }
      },
      m);
}

json kpfl_to_json(const KpflConfig& k) {
  return {{"lambda_aa", k.lambda_aa},
          {"lambda_ia", k.lambda_ia},
          {"gamma_ce", k.gamma_ce},
          {"gamma_ctr", k.gamma_ctr},
          {"gamma_div", k.gamma_div},
          {"tau_temp", k.tau_temp},
          {"generator",
           {{"latent_dim", k.generator.latent_dim},
            {"embedding_dim", k.generator.embedding_dim},
            {"hidden", k.generator.hidden}}},
          {"generator_steps", k.generator_steps},
          {"distill_steps", k.distill_steps},
          {"batch", k.batch},
          {"generator_lr", k.generator_sgd.learning_rate},
          {"generator_momentum", k.generator_sgd.momentum},
          {"distill_lr", k.distill_sgd.learning_rate},
          {"distill_momentum", k.distill_sgd.momentum},
          {"distill_weight_decay", k.distill_sgd.weight_decay},
          {"distill_temperature", k.distill_temperature}};
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ';';
    out += std::to_string(ids[i]);
  }
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  dataset.validate();
  if (num_clients < 1) throw ConfigError("num_clients must be >= 1");
  if (!(heterogeneity.alpha > 0.0)) throw ConfigError("heterogeneity alpha must be > 0");
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (window < 1) throw ConfigError("window must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (hidden.empty()) throw ConfigError("model.hidden needs at least one layer");
  for (std::size_t h : hidden) {
    if (h == 0) throw ConfigError("model.hidden sizes must be >= 1");
  }
  strategy.validate();
  dpfl::validate(participation, num_clients);
  if (const auto* p = std::get_if<Programmed>(&participation); p && p->trace.rounds() < rounds) {
    throw ConfigError("programmed trace has fewer rounds than the experiment");
  }
  if (kpfl) kpfl->validate();
  kpfl_defaults.validate();
  if (matrix) {
    for (const auto& s : matrix->strategies) parse_strategy(s);
    for (const auto& h : matrix->heterogeneity) parse_heterogeneity(h);
    for (const auto& p : matrix->participation) {
      dpfl::validate(parse_participation_name(p, *this), num_clients);
    }
  }
}

ParticipationModel parse_participation_name(std::string_view name, const ExperimentConfig& cfg) {
  if (name == "static") return StaticParticipation{};
  if (name == "timed_random") return cfg.timed_random;
  if (name == "markovian") return cfg.markovian;
  throw ConfigError("unknown participation type '" + std::string(name) +
                    "' (static, timed_random, markovian)");
}

ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  Fields f(doc, "config");
  f.allow({"name", "dataset", "model", "num_clients", "heterogeneity", "participation", "strategy",
           "kpfl", "rounds", "seeds", "output_dir", "paired_static", "window", "workers",
           "pool_snapshots", "matrix", "timed_random", "markovian"});
  f.read("name", cfg.name);
  if (f.has("dataset")) {
    Fields d(f.at("dataset"), "dataset");
    d.allow({"num_classes", "input_dim", "samples_per_class", "separation", "noise_sigma",
             "test_fraction"});
    d.read("num_classes", cfg.dataset.num_classes);
    d.read("input_dim", cfg.dataset.input_dim);
    d.read("samples_per_class", cfg.dataset.samples_per_class);
    d.read("separation", cfg.dataset.separation);
    d.read("noise_sigma", cfg.dataset.noise_sigma);
    d.read("test_fraction", cfg.dataset.test_fraction);
  }
  if (f.has("model")) {
    Fields m(f.at("model"), "model");
    m.allow({"hidden"});
    m.read("hidden", cfg.hidden);
  }
  f.read("num_clients", cfg.num_clients);
  if (f.has("heterogeneity")) {
    const json& h = f.at("heterogeneity");
    if (h.is_string()) {
      cfg.heterogeneity.label = h.get<std::string>();
      cfg.heterogeneity.alpha = heterogeneity_preset(cfg.heterogeneity.label);
    } else {
      Fields hf(h, "heterogeneity");
      hf.allow({"alpha"});
      hf.read("alpha", cfg.heterogeneity.alpha);
      cfg.heterogeneity.label = "alpha_" + format_double(cfg.heterogeneity.alpha);
    }
  }
  // Shared parameter blocks first so named participation entries can use them.
  if (f.has("timed_random")) {
    json tr = f.at("timed_random");
    tr["type"] = "timed_random";
    parse_participation_json(tr, cfg, base_dir);
  }
  if (f.has("markovian")) {
    json mk = f.at("markovian");
    mk["type"] = "markovian";
    parse_participation_json(mk, cfg, base_dir);
  }
  if (f.has("participation")) cfg.participation = parse_participation_json(f.at("participation"), cfg, base_dir);
  if (f.has("strategy")) cfg.strategy = parse_strategy_json(f.at("strategy"), cfg.strategy);
  if (f.has("kpfl")) {
    const json& k = f.at("kpfl");
    if (k.is_boolean()) {
      if (k.get<bool>()) cfg.kpfl = cfg.kpfl_defaults;
    } else {
      cfg.kpfl_defaults = parse_kpfl_json(k, cfg.kpfl_defaults);
      cfg.kpfl = cfg.kpfl_defaults;
    }
  }
  f.read("rounds", cfg.rounds);
  f.read("seeds", cfg.seeds);
  std::string out_dir;
  f.read("output_dir", out_dir);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  f.read("paired_static", cfg.paired_static);
  f.read("window", cfg.window);
  f.read("workers", cfg.workers);
  f.read("pool_snapshots", cfg.pool_snapshots);
  if (f.has("matrix")) {
    Fields m(f.at("matrix"), "matrix");
    m.allow({"strategies", "participation", "heterogeneity", "kpfl"});
    MatrixSpec spec;
    m.read("strategies", spec.strategies);
    m.read("participation", spec.participation);
    m.read("heterogeneity", spec.heterogeneity);
    m.read("kpfl", spec.kpfl);
    cfg.matrix = std::move(spec);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text, path.parent_path());
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json doc;
  doc["name"] = cfg.name;
  doc["dataset"] = {{"num_classes", cfg.dataset.num_classes},
                    {"input_dim", cfg.dataset.input_dim},
                    {"samples_per_class", cfg.dataset.samples_per_class},
                    {"separation", cfg.dataset.separation},
                    {"noise_sigma", cfg.dataset.noise_sigma},
                    {"test_fraction", cfg.dataset.test_fraction}};
  doc["model"] = {{"hidden", cfg.hidden}};
  doc["num_clients"] = cfg.num_clients;
  const auto& het = cfg.heterogeneity;
  bool preset = false;
  for (const char* level : {"iid", "light_niid", "heavy_niid"}) {
    preset |= het.label == level && het.alpha == heterogeneity_preset(level);
  }
  doc["heterogeneity"] = preset ? json(het.label) : json{{"alpha", het.alpha}};
  doc["participation"] = participation_to_json(cfg.participation);
  doc["strategy"] = {{"name", to_string(cfg.strategy.kind)},
                     {"prox_mu", cfg.strategy.prox_mu},
                     {"local_epochs", cfg.strategy.local_epochs},
                     {"lr", cfg.strategy.sgd.learning_rate},
                     {"momentum", cfg.strategy.sgd.momentum},
                     {"weight_decay", cfg.strategy.sgd.weight_decay},
                     {"batch_size", cfg.strategy.sgd.batch_size},
                     {"warm_start",
                      cfg.strategy.warm_start == WarmStart::global ? "global" : "stale_local"}};
  doc["kpfl"] = cfg.kpfl ? kpfl_to_json(*cfg.kpfl) : json(false);
  doc["rounds"] = cfg.rounds;
  doc["seeds"] = cfg.seeds;
  doc["paired_static"] = cfg.paired_static;
  doc["window"] = cfg.window;
  doc["workers"] = cfg.workers;
  doc["pool_snapshots"] = cfg.pool_snapshots;
  return doc.dump(2) + "\n";
}

std::filesystem::path output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') {
    return std::filesystem::path(env);
  }
  return cfg.output_dir;
}

SeedStreams seed_streams(std::uint64_t seed) {
  const Rng root(seed);
  return {root.split("data"), root.split("participation"), root.split("training"),
          root.split("kpfl")};
}

std::vector<double> SeedOutcome::psi() const {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.psi);
  return out;
}

std::vector<double> SeedOutcome::diagnostic(std::string_view key) const {
  std::vector<double> out;
  for (const auto& r : records) {
    auto it = r.diagnostics.find(std::string(key));
    if (it != r.diagnostics.end()) out.push_back(it->second);
  }
  return out;
}

SeedOutcome simulate(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto started = std::chrono::steady_clock::now();
  const SeedStreams streams = seed_streams(seed);
  Rng dataset_rng = streams.data.split("dataset");
  const Dataset data = generate(cfg.dataset, dataset_rng);
  Rng partition_rng = streams.data.split("partition");

  SeedOutcome out;
  out.seed = seed;
  out.partition = partition_dirichlet(data, cfg.num_clients, cfg.heterogeneity.alpha, partition_rng);

  std::optional<KpflPlugin> plugin;
  if (cfg.kpfl) plugin.emplace(out.partition, cfg.dataset.input_dim, *cfg.kpfl, streams.kpfl);

  RunSettings settings{cfg.strategy, cfg.hidden, cfg.workers};
  FederatedRun run(data, out.partition, settings,
                   ParticipationScheduler(cfg.participation, cfg.num_clients, streams.participation),
                   streams.training, plugin ? &*plugin : nullptr);
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    run.run_round();
    if (plugin && cfg.pool_snapshots) out.pool_snapshots.push_back(plugin->pool().snapshot_json(t));
  }
  out.records = run.records();
  out.trace = run.sampled_trace();
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

SeedSummary summarize(std::uint64_t seed, const std::vector<double>& psi,
                      const std::vector<double>* static_psi, std::size_t window,
                      const std::vector<double>* psi_theta) {
  SeedSummary s;
  s.seed = seed;
  s.rounds = psi.size();
  s.window = window;
  s.psi = psi;
  if (psi.empty()) return s;
  const std::size_t w = std::min(window, psi.size());
  s.we_final = windowed_eval(psi, w, WindowStat::mean, psi.size() - 1);
  if (static_psi != nullptr) s.idp = intransigence(psi, *static_psi);
  if (psi.size() >= 2) s.id_full = instability(psi, 0, psi.size());
  if (psi.size() - psi.size() / 2 >= 2) s.id_second_half = instability(psi, psi.size() / 2, psi.size());
  if (psi_theta != nullptr && psi_theta->size() == psi.size()) {
    s.psi_theta = *psi_theta;
    s.we_final_theta = windowed_eval(*psi_theta, w, WindowStat::mean, psi.size() - 1);
  }
  return s;
}

std::string summary_json(const SeedSummary& s) {
  json doc;
  doc["seed"] = s.seed;
  doc["rounds"] = s.rounds;
  doc["window"] = s.window;
  doc["WE_final"] = optional_json(s.we_final);
  doc["IDP"] = optional_json(s.idp);
  doc["ID_full"] = optional_json(s.id_full);
  doc["ID_second_half"] = optional_json(s.id_second_half);
  doc["psi"] = s.psi;
  if (!s.psi_theta.empty()) {
    doc["WE_final_theta"] = optional_json(s.we_final_theta);
    doc["psi_theta"] = s.psi_theta;
  }
  return doc.dump(2) + "\n";
}

std::string rounds_csv(const std::vector<RoundRecord>& records) {
  std::set<std::string> columns;
  for (const auto& r : records) {
    for (const auto& [k, v] : r.diagnostics) columns.insert(k);
  }
  std::ostringstream out;
  out << "t,active_ids,psi";
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  for (const auto& r : records) {
    out << r.round << ',' << join_ids(r.active_ids) << ',' << format_double(r.psi);
    for (const auto& c : columns) {
      out << ',';
      if (auto it = r.diagnostics.find(c); it != r.diagnostics.end()) out << format_double(it->second);
    }
    out << '\n';
  }
  return out.str();
}

std::string timing_csv(const std::vector<RoundRecord>& records) {
  std::ostringstream out;
  out << "t,num_active,wall_seconds\n";
  for (const auto& r : records) {
    out << r.round << ',' << r.active_ids.size() << ',' << format_double(r.wall_seconds) << '\n';
  }
  return out.str();
}

namespace {

struct CellKey {
  std::string heterogeneity;
  std::string strategy;
  bool kpfl = false;
  std::uint64_t seed = 0;

  auto operator<=>(const CellKey&) const = default;
};

using StaticCache = std::map<CellKey, std::vector<double>>;

std::optional<double> mean_of(const std::vector<SeedSummary>& rows,
                              std::optional<double> SeedSummary::*field) {
  if (rows.empty()) return std::nullopt;
  double sum = 0.0;
  for (const auto& r : rows) {
    if (!(r.*field)) return std::nullopt;
    sum += *(r.*field);
  }
  return sum / static_cast<double>(rows.size());
}

void write_seed_dir(const std::filesystem::path& dir, const SeedOutcome& outcome,
                    const SeedSummary& summary, const std::vector<double>* static_psi) {
  write_file_atomic(dir / "rounds.csv", rounds_csv(outcome.records));
  write_file_atomic(dir / "summary.json", summary_json(summary));
  write_file_atomic(dir / "timing.csv", timing_csv(outcome.records));
  write_file_atomic(dir / "partition.csv", partition_csv(outcome.partition));
  write_file_atomic(dir / "partition.json", partition_summary_json(outcome.partition));
  write_file_atomic(dir / "trace.csv", trace_to_csv(outcome.trace));
  for (std::size_t t = 0; t < outcome.pool_snapshots.size(); ++t) {
    write_file_atomic(dir / "pool" / ("round_" + std::to_string(t) + ".json"),
                      outcome.pool_snapshots[t]);
  }
  if (static_psi != nullptr) {
    json doc;
    doc["psi"] = *static_psi;
    write_file_atomic(dir / "static_reference.json", doc.dump(2) + "\n");
  }
}

void log_line(const std::string& msg) { std::cerr << "[dpfl] " << msg << '\n'; }

/// Runs all seeds of one cell; reuses/fills the static cache for pairing.
std::filesystem::path run_cell(const ExperimentConfig& cfg, const std::filesystem::path& cell_dir,
                               StaticCache& cache) {
  const bool is_static = std::holds_alternative<StaticParticipation>(cfg.participation);
  std::vector<SeedSummary> summaries;
  for (std::uint64_t seed : cfg.seeds) {
    const CellKey key{cfg.heterogeneity.label, std::string(to_string(cfg.strategy.kind)),
                      cfg.kpfl.has_value(), seed};
    log_line(cfg.name + " seed " + std::to_string(seed));
    const SeedOutcome outcome = simulate(cfg, seed);
    const std::vector<double> psi = outcome.psi();
    const std::vector<double>* static_psi = nullptr;
    if (is_static) {
      cache[key] = psi;
    } else if (cfg.paired_static) {
      auto it = cache.find(key);
      if (it == cache.end()) {
        ExperimentConfig ref = cfg;
        ref.participation = StaticParticipation{};
        ref.pool_snapshots = false;
        log_line(cfg.name + " seed " + std::to_string(seed) + " (paired static)");
        it = cache.emplace(key, simulate(ref, seed).psi()).first;
      }
      static_psi = &it->second;
    }
    const std::vector<double> psi_theta = outcome.diagnostic("psi_theta");
    SeedSummary summary = summarize(seed, psi, static_psi, cfg.window,
                                    cfg.kpfl ? &psi_theta : nullptr);
    write_seed_dir(cell_dir / ("seed_" + std::to_string(seed)), outcome, summary, static_psi);
    summaries.push_back(std::move(summary));
  }

  json agg;
  agg["name"] = cfg.name;
  agg["heterogeneity"] = cfg.heterogeneity.label;
  agg["alpha"] = cfg.heterogeneity.alpha;
  agg["participation"] = std::string(kind_name(cfg.participation));
  agg["strategy"] = std::string(to_string(cfg.strategy.kind));
  agg["kpfl"] = cfg.kpfl.has_value();
  agg["num_clients"] = cfg.num_clients;
  agg["rounds"] = cfg.rounds;
  agg["window"] = cfg.window;
  agg["seeds"] = cfg.seeds;
  agg["mean"] = {{"WE_final", optional_json(mean_of(summaries, &SeedSummary::we_final))},
                 {"IDP", optional_json(mean_of(summaries, &SeedSummary::idp))},
                 {"ID_full", optional_json(mean_of(summaries, &SeedSummary::id_full))},
                 {"ID_second_half", optional_json(mean_of(summaries, &SeedSummary::id_second_half))}};
  if (cfg.kpfl) {
    agg["mean"]["WE_final_theta"] = optional_json(mean_of(summaries, &SeedSummary::we_final_theta));
  }
  json per_seed = json::array();
  for (const auto& s : summaries) {
    json row = {{"seed", s.seed},
                {"WE_final", optional_json(s.we_final)},
                {"IDP", optional_json(s.idp)},
                {"ID_full", optional_json(s.id_full)},
                {"ID_second_half", optional_json(s.id_second_half)}};
    if (cfg.kpfl) row["WE_final_theta"] = optional_json(s.we_final_theta);
    per_seed.push_back(std::move(row));
  }
  agg["per_seed"] = std::move(per_seed);
  write_file_atomic(cell_dir / "aggregate.json", agg.dump(2) + "\n");
  write_file_atomic(cell_dir / "config.json", config_to_json(cfg));
  return cell_dir;
}

}  // namespace

std::filesystem::path run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  StaticCache cache;
  return run_cell(cfg, output_root(cfg) / cfg.name, cache);
}

std::vector<std::filesystem::path> run_matrix(const ExperimentConfig& cfg) {
  cfg.validate();
  MatrixSpec axes = cfg.matrix.value_or(MatrixSpec{});
  if (axes.strategies.empty()) axes.strategies = {std::string(to_string(cfg.strategy.kind))};
  if (axes.participation.empty()) axes.participation = {"static", "timed_random", "markovian"};
  if (axes.kpfl.empty()) axes.kpfl = {cfg.kpfl.has_value()};
  const bool custom_alpha = axes.heterogeneity.empty();

  const std::filesystem::path root = output_root(cfg) / cfg.name;
  std::vector<std::filesystem::path> cells;
  StaticCache cache;
  const std::vector<std::string> levels =
      custom_alpha ? std::vector<std::string>{cfg.heterogeneity.label} : axes.heterogeneity;
  for (const auto& level : levels) {
    for (const auto& strategy : axes.strategies) {
      for (bool kpfl : axes.kpfl) {
        // Static first so dynamic cells pair against it without recomputation.
        std::vector<std::string> order;
        for (const auto& p : axes.participation) {
          if (p == "static") order.insert(order.begin(), p);
          else order.push_back(p);
        }
        for (const auto& part : order) {
          ExperimentConfig cell = cfg;
          cell.matrix.reset();
          if (!custom_alpha) cell.heterogeneity = {level, heterogeneity_preset(level)};
          cell.strategy.kind = parse_strategy(strategy);
          cell.participation = parse_participation_name(part, cfg);
          cell.kpfl = kpfl ? std::optional<KpflConfig>(cfg.kpfl_defaults) : std::nullopt;
          cell.name = level + "__" + part + "__" + strategy + (kpfl ? "__kpfl" : "");
          cells.push_back(run_cell(cell, root / cell.name, cache));
        }
      }
    }
  }
  return cells;
}

std::filesystem::path replay_experiment(ExperimentConfig cfg, const ParticipationTrace& trace,
                                        std::string_view name_suffix) {
  cfg.participation = Programmed{trace};
  cfg.name += name_suffix;
  return run_experiment(cfg);
}

}  // namespace dpfl
