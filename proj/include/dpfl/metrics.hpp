#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dpfl {

/// Per-round metric trace psi_1..psi_Tf (stored zero-based).
struct EvalSeries {
  std::string label;
  std::vector<double> values;

  std::size_t rounds() const noexcept { return values.size(); }
};

enum class WindowStat { mean, variance };

/// Statistic of psi over the omega rounds ending at zero-based round t.
/// Variance is the population variance of the window.
double windowed_eval(std::span<const double> series, std::size_t window, WindowStat stat,
                     std::size_t t);

/// Mean over all rounds of (static_ref - dynamic). Positive when dynamic
/// participation trails the static reference.
double intransigence(std::span<const double> dynamic, std::span<const double> static_ref);

/// Mean absolute deviation of psi from its least-squares line over rounds
/// (t_s1, t_s2], using 1-based round numbers as the regressor.
double instability(std::span<const double> series, std::size_t t_s1, std::size_t t_s2);

}  // namespace dpfl
