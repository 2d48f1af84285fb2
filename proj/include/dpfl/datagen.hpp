#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dpfl/numkit.hpp"
#include "dpfl/rng.hpp"

namespace dpfl {

/// Gaussian-mixture classification task. Class centers are random directions
/// scaled so the expected distance between two centers equals `separation`.
struct DatasetSpec {
  std::size_t num_classes = 10;
  std::size_t input_dim = 32;
  std::size_t samples_per_class = 500;
  double separation = 4.0;
  double noise_sigma = 1.0;
  double test_fraction = 0.2;

  void validate() const;
};

struct Dataset {
  std::size_t num_classes = 0;
  Tensor2 centers;
  Tensor2 train_x;
  std::vector<int> train_y;
  Tensor2 test_x;
  std::vector<int> test_y;

  /// Number of training samples per class (N_j).
  std::vector<std::size_t> train_class_totals() const;
};

Dataset generate(const DatasetSpec& spec, Rng& rng);

/// Label-skew split of the training set across clients.
struct Partition {
  double alpha = 0.0;
  std::size_t num_classes = 0;
  std::vector<std::vector<std::size_t>> client_indices;
  /// counts[i][j] = n_{i,j}
  std::vector<std::vector<std::size_t>> counts;

  std::size_t num_clients() const noexcept { return client_indices.size(); }
  std::vector<std::size_t> class_totals() const;
  std::size_t client_size(std::size_t client) const { return client_indices.at(client).size(); }
  std::vector<std::size_t> empty_clients() const;
};

/// For each class, draws p ~ Dir(alpha * 1_N) by normalized Gamma(alpha, 1)
/// draws and hands out the shuffled class samples in contiguous chunks sized
/// by largest-remainder rounding of p * N_k.
Partition partition_dirichlet(const Dataset& data, std::size_t num_clients, double alpha, Rng& rng);

/// Dirichlet proportions for one class (exposed for statistical tests).
std::vector<double> sample_dirichlet(std::size_t n, double alpha, Rng& rng);
/// Integer counts summing to `total`, nearest to proportions * total.
std::vector<std::size_t> largest_remainder(std::span<const double> proportions, std::size_t total);

enum class Heterogeneity { iid, light_niid, heavy_niid };

Heterogeneity parse_heterogeneity(std::string_view tag);
std::string_view to_string(Heterogeneity level);
/// IID -> 100, Light-NIID -> 1.0, Heavy-NIID -> 0.1.
double heterogeneity_preset(Heterogeneity level);
double heterogeneity_preset(std::string_view tag);

/// `client_id,sample_index` rows.
std::string partition_csv(const Partition& part);
/// n_{i,j} matrix, class totals and empty-client flags.
std::string partition_summary_json(const Partition& part);

}  // namespace dpfl
