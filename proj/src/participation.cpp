#include "dpfl/participation.hpp"

#include <cmath>
#include <sstream>

#include "dpfl/error.hpp"
#include "dpfl/io.hpp"

namespace dpfl {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

void check_probability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ConfigError(std::string(what) + " must lie in [0, 1]");
  }
}

}  // namespace

double TimedRandom::probability(std::size_t client, std::size_t round) const {
  const ProbabilityPhase* current = nullptr;
  for (const auto& phase : phases) {
    if (phase.start_round <= round) current = &phase;
  }
  if (current == nullptr) return 0.0;
  return current->probs.size() == 1 ? current->probs[0] : current->probs.at(client);
}

void validate(const ParticipationModel& model, std::size_t num_clients) {
  std::visit(
      overloaded{
          [](const StaticParticipation&) {},
          [&](const TimedRandom& m) {
            if (m.phases.empty()) throw ConfigError("timed_random: schedule has no phases");
            std::size_t prev = 0;
            for (std::size_t i = 0; i < m.phases.size(); ++i) {
              const auto& phase = m.phases[i];
              if (i == 0 && phase.start_round != 0) {
                throw ConfigError("timed_random: first phase must start at round 0");
              }
              if (i > 0 && phase.start_round <= prev) {
                throw ConfigError("timed_random: phase start rounds must increase");
              }
              prev = phase.start_round;
              if (phase.probs.size() != 1 && phase.probs.size() != num_clients) {
                throw ConfigError("timed_random: a phase needs 1 or num_clients probabilities");
              }
              for (double p : phase.probs) check_probability(p, "timed_random probability");
            }
          },
          [](const Markovian& m) {
            for (const auto& row : m.transition) {
              check_probability(row[0], "markov transition entry");
              check_probability(row[1], "markov transition entry");
              if (std::abs(row[0] + row[1] - 1.0) > 1e-12) {
                throw ConfigError("markov transition rows must sum to 1");
              }
            }
          },
          [&](const Programmed& m) {
            if (m.trace.num_clients != num_clients) {
              throw ConfigError("programmed trace has " + std::to_string(m.trace.num_clients) +
                                " clients, experiment has " + std::to_string(num_clients));
            }
          },
      },
      model);
}

std::string_view kind_name(const ParticipationModel& model) {
  return std::visit(overloaded{
                        [](const StaticParticipation&) { return std::string_view("static"); },
                        [](const TimedRandom&) { return std::string_view("timed_random"); },
                        [](const Markovian&) { return std::string_view("markovian"); },
                        [](const Programmed&) { return std::string_view("programmed"); },
                    },
                    model);
}

RoundSample sample_round(const ParticipationModel& model, std::size_t num_clients, std::size_t t,
                         const ParticipationState& state, Rng rng) {
  RoundSample out;
  out.state = state;
  std::visit(
      overloaded{
          [&](const StaticParticipation&) {
            for (std::size_t i = 0; i < num_clients; ++i) out.active.push_back(i);
          },
          [&](const TimedRandom& m) {
            for (std::size_t i = 0; i < num_clients; ++i) {
              if (rng.bernoulli(m.probability(i, t))) out.active.push_back(i);
            }
          },
          [&](const Markovian& m) {
            auto& states = out.state.markov;
            if (!out.state.initialized) {
              Rng init = rng.split("init");
              const double p_active =
                  m.initial == MarkovInit::all_active ? 1.0 : stationary_distribution(m.transition).active;
              states.assign(num_clients, 0);
              for (auto& s : states) s = init.bernoulli(p_active) ? 1 : 0;
              out.state.initialized = true;
            }
            if (states.size() != num_clients) throw ValidationError("markov state size mismatch");
            for (std::size_t i = 0; i < num_clients; ++i) {
              // P(next = active | current)
              const double to_active = m.transition[states[i]][1];
              states[i] = rng.bernoulli(to_active) ? 1 : 0;
              if (states[i] == 1) out.active.push_back(i);
            }
          },
          [&](const Programmed& m) {
            if (t >= m.trace.rounds()) {
              throw ValidationError("programmed trace exhausted at round " + std::to_string(t) +
                                    " (trace has " + std::to_string(m.trace.rounds()) + " rounds)");
            }
            const auto& row = m.trace.active[t];
            for (std::size_t i = 0; i < num_clients; ++i) {
              if (row.at(i) != 0) out.active.push_back(i);
            }
          },
      },
      model);
  return out;
}

ParticipationScheduler::ParticipationScheduler(ParticipationModel model, std::size_t num_clients,
                                               Rng rng)
    : model_(std::move(model)), num_clients_(num_clients), rng_(rng) {
  validate(model_, num_clients_);
}

std::vector<std::size_t> ParticipationScheduler::next(std::size_t t) {
  RoundSample sample = sample_round(model_, num_clients_, t, state_, rng_.split(t));
  state_ = std::move(sample.state);
  return std::move(sample.active);
}

StationaryResult stationary_distribution(const std::array<std::array<double, 2>, 2>& transition) {
  const double leave_inactive = transition[0][1];
  const double leave_active = transition[1][0];
  StationaryResult out;
  const double flow = leave_inactive + leave_active;
  if (flow == 0.0) {
    out.degenerate = true;
    return out;
  }
  out.inactive = leave_active / flow;
  out.active = leave_inactive / flow;
  out.periodic = leave_inactive == 1.0 && leave_active == 1.0;
  return out;
}

ParticipationTrace record_trace(const ParticipationModel& model, std::size_t num_clients,
                                std::size_t rounds, Rng rng) {
  ParticipationScheduler scheduler(model, num_clients, rng);
  ParticipationTrace trace;
  trace.num_clients = num_clients;
  for (std::size_t t = 0; t < rounds; ++t) {
    std::vector<std::uint8_t> row(num_clients, 0);
    for (std::size_t id : scheduler.next(t)) row[id] = 1;
    trace.active.push_back(std::move(row));
  }
  return trace;
}

std::string trace_to_csv(const ParticipationTrace& trace) {
  std::ostringstream out;
  out << "# clients=" << trace.num_clients << " rounds=" << trace.rounds() << '\n';
  for (const auto& row : trace.active) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i > 0) out << ',';
      out << (row[i] != 0 ? '1' : '0');
    }
    out << '\n';
  }
  return out.str();
}

ParticipationTrace trace_from_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("missing '# clients=N rounds=R' header", 1);
  ++line_no;
  std::size_t clients = 0, rounds = 0;
  {
    std::istringstream header(line);
    std::string hash, c_field, r_field;
    header >> hash >> c_field >> r_field;
    if (hash != "#" || c_field.rfind("clients=", 0) != 0 || r_field.rfind("rounds=", 0) != 0) {
      throw ParseError("expected header '# clients=N rounds=R'", line_no);
    }
    try {
      clients = std::stoul(c_field.substr(8));
      rounds = std::stoul(r_field.substr(7));
    } catch (const std::exception&) {
      throw ParseError("non-numeric header value", line_no);
    }
  }
  ParticipationTrace trace;
  trace.num_clients = clients;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::uint8_t> row;
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      if (cell == "0") {
        row.push_back(0);
      } else if (cell == "1") {
        row.push_back(1);
      } else {
        throw ParseError("expected 0 or 1, got '" + cell + "'", line_no);
      }
    }
    if (row.size() != clients) {
      throw ParseError("row has " + std::to_string(row.size()) + " values, expected " +
                           std::to_string(clients),
                       line_no);
    }
    trace.active.push_back(std::move(row));
  }
  if (trace.rounds() != rounds) {
    throw ParseError("header declares " + std::to_string(rounds) + " rounds, found " +
                         std::to_string(trace.rounds()),
                     line_no);
  }
  return trace;
}

void save_trace(const ParticipationTrace& trace, const std::filesystem::path& path) {
  write_file_atomic(path, trace_to_csv(trace));
}

ParticipationTrace load_trace(const std::filesystem::path& path) {
  return trace_from_csv(read_file(path));
}

}  // namespace dpfl
