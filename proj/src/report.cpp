#include <algorithm>
#include <cstdio>
#include <json.hpp>
#include <map>
#include <sstream>

#include "dpfl/error.hpp"
#include "dpfl/harness.hpp"
#include "dpfl/io.hpp"

namespace dpfl {

namespace {

using json = nlohmann::json;

struct Cell {
  std::string heterogeneity;
  std::string participation;
  std::string strategy;
  bool kpfl = false;
  json mean;
};

int rank_of(const std::vector<std::string>& order, const std::string& v) {
  auto it = std::find(order.begin(), order.end(), v);
  return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

template <typename Key>
void sort_ranked(std::vector<Key>& keys, const std::vector<std::string>& order) {
  std::sort(keys.begin(), keys.end(), [&](const Key& a, const Key& b) {
    return std::pair(rank_of(order, a), a) < std::pair(rank_of(order, b), b);
  });
}

const std::vector<std::string> kHetOrder{"iid", "light_niid", "heavy_niid"};
const std::vector<std::string> kPartOrder{"static", "timed_random", "markovian", "programmed"};
const std::vector<std::string> kStrategyOrder{"fedavg", "fedprox", "scaffold"};

std::string part_label(const std::string& p) {
  if (p == "static") return "Stat.";
  if (p == "timed_random") return "T-R";
  if (p == "markovian") return "M";
  if (p == "programmed") return "Prog.";
  return p;
}

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

std::string lpad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

}  // namespace

std::string report(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw ValidationError("report: not a directory: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "aggregate.json") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  std::vector<Cell> cells;
  for (const auto& path : files) {
    json doc;
    try {
      doc = json::parse(read_file(path));
      cells.push_back({doc.at("heterogeneity").get<std::string>(),
                       doc.at("participation").get<std::string>(),
                       doc.at("strategy").get<std::string>(), doc.at("kpfl").get<bool>(),
                       doc.at("mean")});
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), 0);
    }
  }

  std::vector<std::string> levels;
  for (const auto& c : cells) {
    if (std::find(levels.begin(), levels.end(), c.heterogeneity) == levels.end()) {
      levels.push_back(c.heterogeneity);
    }
  }
  sort_ranked(levels, kHetOrder);

  const std::vector<std::pair<std::string, std::string>> metrics{
      {"WE", "WE_final"}, {"IDP", "IDP"}, {"ID", "ID_full"}, {"ID-2nd", "ID_second_half"}};

  std::ostringstream out;
  for (const auto& level : levels) {
    std::vector<std::string> strategies;
    std::vector<std::string> parts;
    for (const auto& c : cells) {
      if (c.heterogeneity != level) continue;
      if (std::find(strategies.begin(), strategies.end(), c.strategy) == strategies.end()) {
        strategies.push_back(c.strategy);
      }
      if (std::find(parts.begin(), parts.end(), c.participation) == parts.end()) {
        parts.push_back(c.participation);
      }
    }
    sort_ranked(strategies, kStrategyOrder);
    sort_ranked(parts, kPartOrder);
    std::vector<std::pair<std::string, bool>> columns;
    for (const auto& s : strategies) {
      for (bool k : {false, true}) {
        bool any = std::any_of(cells.begin(), cells.end(), [&](const Cell& c) {
          return c.heterogeneity == level && c.strategy == s && c.kpfl == k;
        });
        if (any) columns.emplace_back(s, k);
      }
    }

    out << "heterogeneity: " << level << '\n';
    out << pad("Metric", 8) << pad("Type", 7);
    for (const auto& [s, k] : columns) out << lpad(k ? s + "+KPFL" : s, 14);
    out << '\n';
    for (const auto& [label, key] : metrics) {
      for (const auto& part : parts) {
        std::vector<std::string> values;
        bool any = false;
        for (const auto& [s, k] : columns) {
          std::string v = "-";
          for (const auto& c : cells) {
            if (c.heterogeneity == level && c.participation == part && c.strategy == s &&
                c.kpfl == k && c.mean.contains(key) && c.mean.at(key).is_number()) {
              v = fixed2(c.mean.at(key).get<double>());
              any = true;
            }
          }
          values.push_back(v);
        }
        if (!any) continue;
        out << pad(label, 8) << pad(part_label(part), 7);
        for (const auto& v : values) out << lpad(v, 14);
        out << '\n';
      }
    }
  }
  return out.str();
}

}  // namespace dpfl
