#include "dpfl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "dpfl/error.hpp"

namespace dpfl {

void DatasetSpec::validate() const {
  if (num_classes < 2) throw ConfigError("dataset: num_classes must be >= 2");
  if (input_dim < 2) throw ConfigError("dataset: input_dim must be >= 2");
  if (samples_per_class < 1) throw ConfigError("dataset: samples_per_class must be >= 1");
  if (!(separation > 0.0)) throw ConfigError("dataset: separation must be > 0");
  if (!(noise_sigma >= 0.0)) throw ConfigError("dataset: noise_sigma must be >= 0");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw ConfigError("dataset: test_fraction must be in [0, 1)");
  }
}

std::vector<std::size_t> Dataset::train_class_totals() const {
  std::vector<std::size_t> totals(num_classes, 0);
  for (int y : train_y) ++totals[static_cast<std::size_t>(y)];
  return totals;
}

Dataset generate(const DatasetSpec& spec, Rng& rng) {
  spec.validate();
  const auto k_classes = static_cast<Eigen::Index>(spec.num_classes);
  const auto dim = static_cast<Eigen::Index>(spec.input_dim);

  Dataset data;
  data.num_classes = spec.num_classes;
  data.centers.resize(k_classes, dim);
  Rng center_rng = rng.split("centers");
  // Two independent unit vectors are sqrt(2) apart on average in high dimension.
  const double radius = spec.separation / std::sqrt(2.0);
  for (Eigen::Index k = 0; k < k_classes; ++k) {
    Eigen::RowVectorXd dir(dim);
    do {
      for (Eigen::Index c = 0; c < dim; ++c) dir(c) = center_rng.normal();
    } while (dir.norm() == 0.0);
    data.centers.row(k) = radius * dir / dir.norm();
  }

  const std::size_t per_class = spec.samples_per_class;
  const auto n_test =
      static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(per_class)));
  const std::size_t n_train = per_class - n_test;
  data.train_x.resize(static_cast<Eigen::Index>(n_train * spec.num_classes), dim);
  data.test_x.resize(static_cast<Eigen::Index>(n_test * spec.num_classes), dim);
  data.train_y.reserve(n_train * spec.num_classes);
  data.test_y.reserve(n_test * spec.num_classes);

  Rng sample_rng = rng.split("samples");
  Eigen::Index train_row = 0, test_row = 0;
  for (Eigen::Index k = 0; k < k_classes; ++k) {
    for (std::size_t s = 0; s < per_class; ++s) {
      Eigen::RowVectorXd x = data.centers.row(k);
      for (Eigen::Index c = 0; c < dim; ++c) x(c) += spec.noise_sigma * sample_rng.normal();
      if (s < n_train) {
        data.train_x.row(train_row++) = x;
        data.train_y.push_back(static_cast<int>(k));
      } else {
        data.test_x.row(test_row++) = x;
        data.test_y.push_back(static_cast<int>(k));
      }
    }
  }
  return data;
}

std::vector<std::size_t> Partition::class_totals() const {
  std::vector<std::size_t> totals(num_classes, 0);
  for (const auto& row : counts) {
    for (std::size_t j = 0; j < num_classes; ++j) totals[j] += row[j];
  }
  return totals;
}

std::vector<std::size_t> Partition::empty_clients() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < client_indices.size(); ++i) {
    if (client_indices[i].empty()) out.push_back(i);
  }
  return out;
}

std::vector<double> sample_dirichlet(std::size_t n, double alpha, Rng& rng) {
  if (n == 0) throw ValidationError("dirichlet: n must be >= 1");
  if (!(alpha > 0.0)) throw ValidationError("dirichlet: alpha must be > 0");
  std::vector<double> p(n);
  double total = 0.0;
  for (auto& v : p) {
    v = rng.gamma(alpha);
    total += v;
  }
  if (!(total > 0.0)) {
    // Every Gamma draw underflowed (tiny alpha): all mass to one client.
    std::fill(p.begin(), p.end(), 0.0);
    p[rng.below(n)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= total;
  return p;
}

std::vector<std::size_t> largest_remainder(std::span<const double> proportions, std::size_t total) {
  const std::size_t n = proportions.size();
  std::vector<std::size_t> counts(n, 0);
  std::vector<double> remainder(n, 0.0);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = proportions[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  if (assigned > total) throw NumericError("largest_remainder: proportions exceed 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t r = 0; assigned < total; ++r, ++assigned) ++counts[order[r % n]];
  return counts;
}

Partition partition_dirichlet(const Dataset& data, std::size_t num_clients, double alpha,
                              Rng& rng) {
  if (num_clients < 1) throw ValidationError("partition: num_clients must be >= 1");
  if (!(alpha > 0.0)) throw ValidationError("partition: alpha must be > 0");

  Partition part;
  part.alpha = alpha;
  part.num_classes = data.num_classes;
  part.client_indices.assign(num_clients, {});
  part.counts.assign(num_clients, std::vector<std::size_t>(data.num_classes, 0));

  std::vector<std::vector<std::size_t>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.train_y.size(); ++i) {
    by_class[static_cast<std::size_t>(data.train_y[i])].push_back(i);
  }
  for (std::size_t k = 0; k < data.num_classes; ++k) {
    Rng class_rng = rng.split(k);
    auto& members = by_class[k];
    shuffle(std::span<std::size_t>(members), class_rng);
    const auto p = sample_dirichlet(num_clients, alpha, class_rng);
    const auto counts = largest_remainder(p, members.size());
    std::size_t cursor = 0;
    for (std::size_t c = 0; c < num_clients; ++c) {
      for (std::size_t s = 0; s < counts[c]; ++s) part.client_indices[c].push_back(members[cursor++]);
      part.counts[c][k] = counts[c];
    }
  }
  for (auto& idx : part.client_indices) std::sort(idx.begin(), idx.end());
  return part;
}

Heterogeneity parse_heterogeneity(std::string_view tag) {
  if (tag == "iid") return Heterogeneity::iid;
  if (tag == "light_niid") return Heterogeneity::light_niid;
  if (tag == "heavy_niid") return Heterogeneity::heavy_niid;
  throw ConfigError("unknown heterogeneity level '" + std::string(tag) + "'");
}

std::string_view to_string(Heterogeneity level) {
  switch (level) {
    case Heterogeneity::iid: return "iid";
    case Heterogeneity::light_niid: return "light_niid";
    case Heterogeneity::heavy_niid: return "heavy_niid";
  }
  return "unknown";
}

double heterogeneity_preset(Heterogeneity level) {
  switch (level) {
    case Heterogeneity::iid: return 100.0;
    case Heterogeneity::light_niid: return 1.0;
    case Heterogeneity::heavy_niid: return 0.1;
  }
  throw ConfigError("unknown heterogeneity level");
}

double heterogeneity_preset(std::string_view tag) {
  return heterogeneity_preset(parse_heterogeneity(tag));
}

std::string partition_csv(const Partition& part) {
  std::ostringstream out;
  out << "client_id,sample_index\n";
  for (std::size_t c = 0; c < part.client_indices.size(); ++c) {
    for (std::size_t idx : part.client_indices[c]) out << c << ',' << idx << '\n';
  }
  return out.str();
}

std::string partition_summary_json(const Partition& part) {
  nlohmann::json doc;
  doc["alpha"] = part.alpha;
  doc["num_clients"] = part.num_clients();
  doc["num_classes"] = part.num_classes;
  doc["counts"] = part.counts;
  doc["class_totals"] = part.class_totals();
  doc["empty_clients"] = part.empty_clients();
  return doc.dump(2) + "\n";
}

}  // namespace dpfl
