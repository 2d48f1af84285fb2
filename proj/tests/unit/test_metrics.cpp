#include <doctest.h>

#include "dpfl/error.hpp"
#include "dpfl/metrics.hpp"
#include "dpfl/rng.hpp"
#include "oracles.hpp"

TEST_SUITE("metrics") {
  TEST_CASE("windowed_eval examples") {
    const std::vector<double> s{1, 2, 3, 4, 5};
    CHECK(dpfl::windowed_eval(s, 5, dpfl::WindowStat::mean, 4) == 3.0);
    for (std::size_t t = 0; t < s.size(); ++t) {
      CHECK(dpfl::windowed_eval(s, 1, dpfl::WindowStat::mean, t) == s[t]);
    }
    const std::vector<double> c(8, 42.5);
    CHECK(dpfl::windowed_eval(c, 4, dpfl::WindowStat::mean, 7) == 42.5);
    CHECK(dpfl::windowed_eval(c, 4, dpfl::WindowStat::variance, 7) == 0.0);
    CHECK_THROWS_AS(dpfl::windowed_eval(s, 5, dpfl::WindowStat::mean, 3), dpfl::ValidationError);
    CHECK_THROWS_AS(dpfl::windowed_eval(s, 0, dpfl::WindowStat::mean, 3), dpfl::ValidationError);
  }

  TEST_CASE("intransigence examples") {
    const std::vector<double> ref{10, 20}, dyn{8, 16};
    CHECK(dpfl::intransigence(dyn, ref) == 3.0);
    CHECK(dpfl::intransigence(ref, ref) == 0.0);
    CHECK(dpfl::intransigence(ref, dyn) == -3.0);
    CHECK_THROWS_AS(dpfl::intransigence(ref, std::vector<double>{1.0}), dpfl::ValidationError);
  }

  TEST_CASE("instability examples") {
    std::vector<double> line, constant(10, 3.0);
    for (int i = 0; i < 10; ++i) line.push_back(2.0 + 0.5 * i);
    CHECK(dpfl::instability(line, 0, 10) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(dpfl::instability(constant, 0, 10) == 0.0);
    const std::vector<double> zigzag{0, 2, 0, 2};
    // Normal equations: slope 2/5, intercept 0, residuals .4 1.2 1.2 .4
    CHECK(std::abs(dpfl::instability(zigzag, 0, 4) - 0.8) < 1e-12);
    CHECK_THROWS_AS(dpfl::instability(zigzag, 3, 4), dpfl::ValidationError);
    CHECK_THROWS_AS(dpfl::instability(zigzag, 0, 5), dpfl::ValidationError);
  }

  TEST_CASE("metrics match brute-force oracles on 1000 random series") {
    dpfl::Rng rng(2024);
    std::size_t worst_fail = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 2 + rng.below(120);
      std::vector<double> a(n), b(n);
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = 100.0 * rng.uniform();
        b[i] = 100.0 * rng.uniform();
      }
      const std::size_t w = 1 + rng.below(n);
      const std::size_t t = w - 1 + rng.below(n - w + 1);
      const std::size_t t1 = rng.below(n - 1);
      const std::size_t t2 = t1 + 2 + rng.below(n - t1 - 1);
      bool ok = true;
      ok &= std::abs(dpfl::windowed_eval(a, w, dpfl::WindowStat::mean, t) -
                     oracle::windowed_mean(a, w, t)) <= 1e-12;
      const double var = oracle::windowed_variance(a, w, t);
      ok &= std::abs(dpfl::windowed_eval(a, w, dpfl::WindowStat::variance, t) - var) <=
            1e-12 * std::max(1.0, var);
      ok &= std::abs(dpfl::intransigence(a, b) - oracle::intransigence(a, b)) <= 1e-12;
      ok &= dpfl::intransigence(a, b) == -dpfl::intransigence(b, a);
      ok &= std::abs(dpfl::instability(a, t1, t2) - oracle::instability(a, t1, t2)) <= 1e-12;
      if (!ok) ++worst_fail;
    }
    CHECK(worst_fail == 0);
  }
}
