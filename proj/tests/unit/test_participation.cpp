#include <doctest.h>

#include <cmath>

#include "dpfl/error.hpp"
#include "dpfl/participation.hpp"

using namespace dpfl;

namespace {

std::vector<double> active_fractions(const ParticipationModel& model, std::size_t n,
                                     std::size_t rounds, std::uint64_t seed) {
  ParticipationScheduler sched(model, n, Rng(seed));
  std::vector<double> frac(n, 0.0);
  for (std::size_t t = 0; t < rounds; ++t) {
    for (std::size_t id : sched.next(t)) frac[id] += 1.0;
  }
  for (auto& f : frac) f /= static_cast<double>(rounds);
  return frac;
}

}  // namespace

TEST_SUITE("participation") {
  TEST_CASE("static selects everyone") {
    ParticipationScheduler sched(StaticParticipation{}, 5, Rng(1));
    for (std::size_t t = 0; t < 10; ++t) {
      CHECK(sched.next(t) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    }
  }

  TEST_CASE("timed random boundary probabilities") {
    ParticipationScheduler all(TimedRandom{{{0, {1.0}}}}, 6, Rng(2));
    ParticipationScheduler none(TimedRandom{{{0, {0.0}}}}, 6, Rng(2));
    for (std::size_t t = 0; t < 20; ++t) {
      CHECK(all.next(t).size() == 6);
      CHECK(none.next(t).empty());
    }
  }

  TEST_CASE("timed random phases switch at their start round") {
    TimedRandom m{{{0, {1.0}}, {5, {0.0}}}};
    ParticipationScheduler sched(m, 3, Rng(3));
    for (std::size_t t = 0; t < 10; ++t) CHECK(sched.next(t).size() == (t < 5 ? 3u : 0u));
  }

  TEST_CASE("timed random p=0.5 stays inside its binomial band") {
    const std::size_t n = 10, rounds = 10000;
    const auto frac = active_fractions(TimedRandom{}, n, rounds, 4);
    const double sd = std::sqrt(0.25 / static_cast<double>(rounds));
    for (double f : frac) CHECK(std::abs(f - 0.5) <= 4.0 * sd);
  }

  TEST_CASE("markovian long-run activity matches the stationary distribution") {
    const auto pi = stationary_distribution(Markovian{}.transition);
    CHECK(pi.active == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(pi.inactive == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_FALSE(pi.degenerate);
    for (double f : active_fractions(Markovian{}, 4, 100000, 5)) CHECK(std::abs(f - 0.5) <= 0.02);
  }

  TEST_CASE("markovian asymmetric chain hits its own stationary share") {
    Markovian m;
    m.transition = {{{0.9, 0.1}, {0.3, 0.7}}};
    const auto pi = stationary_distribution(m.transition);
    // pi_active = p01 / (p01 + p10)
    CHECK(pi.active == doctest::Approx(0.25).epsilon(1e-12));
    for (double f : active_fractions(m, 3, 100000, 6)) CHECK(std::abs(f - 0.25) <= 0.02);
  }

  TEST_CASE("markov all_active initial policy starts with everyone") {
    Markovian m;
    m.initial = MarkovInit::all_active;
    m.transition = {{{1.0, 0.0}, {0.0, 1.0}}};
    ParticipationScheduler sched(m, 4, Rng(7));
    CHECK(sched.next(0).size() == 4);
    CHECK(sched.next(1).size() == 4);
  }

  TEST_CASE("stationary distribution edge cases") {
    const auto periodic = stationary_distribution({{{0.0, 1.0}, {1.0, 0.0}}});
    CHECK(periodic.active == 0.5);
    CHECK(periodic.periodic);
    const auto identity = stationary_distribution({{{1.0, 0.0}, {0.0, 1.0}}});
    CHECK(identity.degenerate);
    CHECK(identity.active == 0.5);
  }

  TEST_CASE("invalid models are rejected") {
    Markovian m;
    m.transition = {{{0.7, 0.2}, {0.2, 0.8}}};
    CHECK_THROWS_AS(validate(m, 3), ConfigError);
    CHECK_THROWS_AS(validate(TimedRandom{{{0, {1.5}}}}, 3), ConfigError);
    CHECK_THROWS_AS(validate(TimedRandom{{{0, {0.5, 0.5}}}}, 3), ConfigError);
  }

  TEST_CASE("trace CSV round-trips") {
    ParticipationTrace empty{3, {}};
    CHECK(trace_from_csv(trace_to_csv(empty)) == empty);
    ParticipationTrace t{2, {{1, 0}, {0, 1}, {1, 1}}};
    const std::string csv = trace_to_csv(t);
    CHECK(trace_from_csv(csv) == t);
    CHECK(trace_to_csv(trace_from_csv(csv)) == csv);
  }

  TEST_CASE("malformed trace lines report their line number") {
    try {
      trace_from_csv("# clients=2 rounds=2\n1,0\n1,x\n");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(trace_from_csv("# clients=2 rounds=1\n1,0,1\n"), ParseError);
  }

  TEST_CASE("recorded trace replays through Programmed") {
    const auto trace = record_trace(Markovian{}, 5, 50, Rng(8));
    ParticipationScheduler original(Markovian{}, 5, Rng(8));
    ParticipationScheduler replay(Programmed{trace}, 5, Rng(999));
    for (std::size_t t = 0; t < 50; ++t) CHECK(original.next(t) == replay.next(t));
    CHECK_THROWS_AS(replay.next(50), ValidationError);
  }
}
