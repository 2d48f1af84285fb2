#include "dpfl/metrics.hpp"

#include <cmath>

#include "dpfl/error.hpp"

namespace dpfl {

double windowed_eval(std::span<const double> series, std::size_t window, WindowStat stat,
                     std::size_t t) {
  if (window < 1) throw ValidationError("windowed_eval: window must be >= 1");
  if (t >= series.size()) throw ValidationError("windowed_eval: round past end of series");
  if (t + 1 < window) {
    throw ValidationError("windowed_eval: window of " + std::to_string(window) +
                          " exceeds the start of the series at round " + std::to_string(t));
  }
  const auto slice = series.subspan(t + 1 - window, window);
  double mean = 0.0;
  for (double v : slice) mean += v;
  mean /= static_cast<double>(window);
  if (stat == WindowStat::mean) return mean;
  double var = 0.0;
  for (double v : slice) var += (v - mean) * (v - mean);
  return var / static_cast<double>(window);
}

double intransigence(std::span<const double> dynamic, std::span<const double> static_ref) {
  if (dynamic.size() != static_ref.size()) {
    throw ValidationError("intransigence: series lengths differ (" +
                          std::to_string(dynamic.size()) + " vs " +
                          std::to_string(static_ref.size()) + ")");
  }
  if (dynamic.empty()) throw ValidationError("intransigence: empty series");
  double gap = 0.0;
  for (std::size_t i = 0; i < dynamic.size(); ++i) gap += static_ref[i] - dynamic[i];
  return gap / static_cast<double>(dynamic.size());
}

double instability(std::span<const double> series, std::size_t t_s1, std::size_t t_s2) {
  if (t_s2 > series.size()) throw ValidationError("instability: window past end of series");
  if (t_s1 >= t_s2 || t_s2 - t_s1 < 2) {
    throw ValidationError("instability: window (" + std::to_string(t_s1) + ", " +
                          std::to_string(t_s2) + "] must span at least 2 rounds");
  }
  const double n = static_cast<double>(t_s2 - t_s1);
  // Round i (1-based) is series[i - 1].
  double mean_x = 0.0, mean_y = 0.0;
  for (std::size_t i = t_s1 + 1; i <= t_s2; ++i) {
    mean_x += static_cast<double>(i);
    mean_y += series[i - 1];
  }
  mean_x /= n;
  mean_y /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = t_s1 + 1; i <= t_s2; ++i) {
    const double dx = static_cast<double>(i) - mean_x;
    sxy += dx * (series[i - 1] - mean_y);
    sxx += dx * dx;
  }
  const double slope = sxy / sxx;
  double deviation = 0.0;
  for (std::size_t i = t_s1 + 1; i <= t_s2; ++i) {
    const double fitted = mean_y + slope * (static_cast<double>(i) - mean_x);
    deviation += std::abs(fitted - series[i - 1]);
  }
  return deviation / n;
}

}  // namespace dpfl
