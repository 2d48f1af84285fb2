#pragma once

// Knowledge-pool plugin: keeps the latest model of every client that has
// ever participated, weights entries by active/idle age and data coverage,
// aggregates Theta from the whole pool, then refines Theta into Theta' by
// distilling the age-weighted pool ensemble on samples from a conditional
// generator.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpfl/datagen.hpp"
#include "dpfl/flcore.hpp"
#include "dpfl/numkit.hpp"
#include "dpfl/rng.hpp"

namespace dpfl {

struct GeneratorSpec {
  std::size_t latent_dim = 16;
  std::size_t embedding_dim = 8;
  std::vector<std::size_t> hidden{64, 64};
};

struct KpflConfig {
  /// Age decay coefficients; negative values shrink weight with age.
  double lambda_aa = -0.1;
  double lambda_ia = -0.1;
  double gamma_ce = 1.0;
  double gamma_ctr = 0.5;
  double gamma_div = 0.5;
  /// Contrastive temperature.
  double tau_temp = 0.5;
  GeneratorSpec generator;
  std::size_t generator_steps = 50;
  std::size_t distill_steps = 20;
  std::size_t batch = 64;
  SgdConfig generator_sgd{0.01, 0.9, 0.0, 64};
  SgdConfig distill_sgd{0.01, 0.9, 0.0, 64};
  double distill_temperature = 1.0;

  void validate() const;
};

enum class PoolState { active, idle };

struct PoolEntry {
  std::size_t client_id = 0;
  /// False until the client's first active round.
  bool present = false;
  MlpModel theta;
  Vector z;
  std::size_t tau = 0;
  std::size_t first_seen = 0;
  PoolState state = PoolState::idle;
  std::size_t aa = 0;
  std::size_t ia = 0;
  double aw = 1.0;
  double dw = 0.0;
  double eps = 0.0;
  std::vector<std::size_t> counts;
  /// Completed segment lengths, for age bookkeeping checks.
  std::size_t active_rounds = 0;
  std::size_t idle_rounds = 0;
};

/// exp(lambda_aa * aa) when active, exp(lambda_ia * ia) when idle.
double age_weight(const PoolEntry& entry, double lambda_aa, double lambda_ia);
/// sum_j n_{i,j} / N_j; classes with N_j == 0 contribute nothing.
double data_bias_weight(std::span<const std::size_t> counts, std::span<const std::size_t> class_totals);

class KnowledgePool {
 public:
  /// `counts[i][j]` = n_{i,j} for every client of the partition.
  KnowledgePool(std::vector<std::vector<std::size_t>> counts, double lambda_aa, double lambda_ia);

  /// Marks `active_ids` active and everyone else idle at round t, stores the
  /// updates' models and payloads, resets tau on state flips and recomputes
  /// ages and weights.
  void update(std::size_t t, std::span<const std::size_t> active_ids,
              std::span<const ClientUpdate> updates);

  const std::vector<PoolEntry>& entries() const noexcept { return entries_; }
  std::vector<const PoolEntry*> present() const;
  std::size_t size() const;
  const std::vector<std::size_t>& class_totals() const noexcept { return class_totals_; }
  std::size_t num_classes() const noexcept { return class_totals_.size(); }

  /// Per-client state, tau, ages, weights and counts as JSON.
  std::string snapshot_json(std::size_t t) const;

 private:
  std::vector<PoolEntry> entries_;
  std::vector<std::size_t> class_totals_;
  double lambda_aa_;
  double lambda_ia_;
};

struct PoolAggregate {
  MlpModel theta;
  Vector z;
  /// Normalized W_i for each present entry, ascending client id.
  std::vector<double> weights;
  std::vector<std::size_t> client_ids;
};

/// Theta = sum_i W~_i theta_i with W_i = aw_i * eps_i + dw_i normalized over
/// the present entries. Z is aggregated the same way when every entry carries
/// a payload of equal size, and is empty otherwise.
PoolAggregate aggregate_pool(const KnowledgePool& pool);

/// Pool members acting as teachers with per-class weights
/// W_i^y = aw_i + n_{i,y} / N_y, normalized over i for each y.
struct TeacherSet {
  std::vector<const MlpModel*> models;
  Tensor2 class_weights;  // members x classes
};

TeacherSet make_teachers(const KnowledgePool& pool);

/// G(z, y): latent noise concatenated with a learned label embedding, fed
/// through an MLP whose output lives in the classifier's input space.
class ConditionalGenerator {
 public:
  ConditionalGenerator() = default;
  ConditionalGenerator(std::size_t num_classes, std::size_t output_dim, const GeneratorSpec& spec,
                       Rng& rng);

  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t latent_dim() const noexcept { return latent_dim_; }
  std::size_t embedding_dim() const noexcept { return embedding_dim_; }
  std::size_t output_dim() const noexcept { return net_.out_dim(); }

  Tensor2 make_input(const Tensor2& z, std::span<const int> labels) const;
  Tensor2 generate(const Tensor2& z, std::span<const int> labels) const;

  MlpModel& net() noexcept { return net_; }
  const MlpModel& net() const noexcept { return net_; }
  /// Row-major (classes x embedding_dim).
  Vector& embedding() noexcept { return embedding_; }
  const Vector& embedding() const noexcept { return embedding_; }

 private:
  std::size_t num_classes_ = 0;
  std::size_t latent_dim_ = 0;
  std::size_t embedding_dim_ = 0;
  MlpModel net_;
  Vector embedding_;
};

struct GeneratorInputs {
  Tensor2 z;
  std::vector<int> labels;
};

/// y ~ N_y / sum N, z ~ N(0, I).
GeneratorInputs sample_generator_inputs(std::size_t latent_dim, std::size_t batch,
                                        std::span<const std::size_t> class_totals, Rng& rng);

struct GeneratedBatch {
  Tensor2 z;
  std::vector<int> labels;
  Tensor2 x;
};

GeneratedBatch sample_generator(const ConditionalGenerator& generator, std::size_t batch,
                                std::span<const std::size_t> class_totals, Rng& rng);

struct GeneratorLoss {
  double total = 0.0;
  double ce = 0.0;
  double ctr = 0.0;
  double div = 0.0;
  Vector net_grad;
  Vector embedding_grad;
};

/// gamma_ce * L_ce + gamma_ctr * L_ctr + gamma_div * L_div and its gradient
/// w.r.t. the generator only (teachers and Theta are frozen).
///  L_ce  = mean_b sum_i W~_i^{y_b} CE(theta_i(x_b), y_b)
///  L_ctr = mean_b -log softmax_{y'}(cos(f(x_b), cen(y')) / tau)[y_b], with
///          cen(y) the normalized class-y column of Theta's head
///  L_div = exp(-mean_{a<b} |x_a - x_b| / (|z_a - z_b| + 1e-8))
GeneratorLoss generator_loss(const ConditionalGenerator& generator, const Tensor2& z,
                             std::span<const int> labels, const TeacherSet& teachers,
                             const MlpModel& theta, const KpflConfig& cfg);

/// Age-weighted ensemble logits sum_i W~_i^{y_b} theta_i(x_b).
Tensor2 ensemble_logits(const TeacherSet& teachers, const Tensor2& x, std::span<const int> labels);

/// One SGD step of mean KL(softmax(ensemble) || softmax(Theta)) on a fixed
/// batch. Returns the loss before the step.
double distill_step(MlpModel& theta, Vector& velocity, const Tensor2& x,
                    std::span<const int> labels, const TeacherSet& teachers, const SgdConfig& sgd,
                    double temperature);

struct DistillResult {
  MlpModel refined;
  std::vector<double> losses;
};

/// Fine-tunes a copy of Theta for `steps` freshly generated batches.
DistillResult distill(const MlpModel& theta, const ConditionalGenerator& generator,
                      const TeacherSet& teachers, std::span<const std::size_t> class_totals,
                      std::size_t steps, std::size_t batch, const SgdConfig& sgd,
                      double temperature, Rng& rng);

/// Binds the pool, Theta aggregation, generator training and distillation to
/// the two server hooks of FederatedRun.
class KpflPlugin : public RoundPlugin {
 public:
  KpflPlugin(const Partition& partition, std::size_t input_dim, KpflConfig cfg, Rng rng);

  std::optional<AggregateOverride> before_aggregation(const RoundContext& ctx,
                                                      std::span<const ClientUpdate> updates) override;
  std::optional<MlpModel> after_aggregation(const RoundContext& ctx, const MlpModel& theta) override;
  void add_diagnostics(std::map<std::string, double>& out) const override;

  const KnowledgePool& pool() const noexcept { return pool_; }
  const ConditionalGenerator& generator() const noexcept { return generator_; }
  const KpflConfig& config() const noexcept { return cfg_; }

 private:
  KpflConfig cfg_;
  KnowledgePool pool_;
  ConditionalGenerator generator_;
  Vector gen_velocity_;
  Vector emb_velocity_;
  Rng rng_;
  std::map<std::string, double> diag_;
};

}  // namespace dpfl
