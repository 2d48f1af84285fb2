#include "dpfl/kpfl.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "dpfl/error.hpp"

namespace dpfl {

void KpflConfig::validate() const {
  if (!(gamma_ce >= 0.0 && gamma_ctr >= 0.0 && gamma_div >= 0.0)) {
    throw ConfigError("kpfl: gamma weights must be >= 0");
  }
  if (!(tau_temp > 0.0)) throw ConfigError("kpfl: tau_temp must be > 0");
  if (!(distill_temperature > 0.0)) throw ConfigError("kpfl: distill_temperature must be > 0");
  if (batch < 1) throw ConfigError("kpfl: batch must be >= 1");
  if (gamma_div > 0.0 && batch < 2) throw ConfigError("kpfl: diversity loss needs batch >= 2");
  if (generator.latent_dim < 1) throw ConfigError("kpfl: generator latent_dim must be >= 1");
  if (!std::isfinite(lambda_aa) || !std::isfinite(lambda_ia)) {
    throw ConfigError("kpfl: lambda values must be finite");
  }
  generator_sgd.validate();
  distill_sgd.validate();
}

double age_weight(const PoolEntry& entry, double lambda_aa, double lambda_ia) {
  return entry.state == PoolState::active
             ? std::exp(lambda_aa * static_cast<double>(entry.aa))
             : std::exp(lambda_ia * static_cast<double>(entry.ia));
}

double data_bias_weight(std::span<const std::size_t> counts,
                        std::span<const std::size_t> class_totals) {
  if (counts.size() != class_totals.size()) throw ShapeError("data_bias_weight: class count mismatch");
  double dw = 0.0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    if (class_totals[j] > 0) {
      dw += static_cast<double>(counts[j]) / static_cast<double>(class_totals[j]);
    }
  }
  return dw;
}

KnowledgePool::KnowledgePool(std::vector<std::vector<std::size_t>> counts, double lambda_aa,
                             double lambda_ia)
    : lambda_aa_(lambda_aa), lambda_ia_(lambda_ia) {
  const std::size_t classes = counts.empty() ? 0 : counts.front().size();
  class_totals_.assign(classes, 0);
  std::size_t grand_total = 0;
  for (const auto& row : counts) {
    if (row.size() != classes) throw ShapeError("knowledge pool: ragged count matrix");
    for (std::size_t j = 0; j < classes; ++j) {
      class_totals_[j] += row[j];
      grand_total += row[j];
    }
  }
  for (std::size_t i = 0; i < counts.size(); ++i) {
    PoolEntry e;
    e.client_id = i;
    e.counts = std::move(counts[i]);
    e.dw = data_bias_weight(e.counts, class_totals_);
    std::size_t own = 0;
    for (std::size_t c : e.counts) own += c;
    e.eps = grand_total > 0 ? static_cast<double>(own) / static_cast<double>(grand_total) : 0.0;
    entries_.push_back(std::move(e));
  }
}

void KnowledgePool::update(std::size_t t, std::span<const std::size_t> active_ids,
                           std::span<const ClientUpdate> updates) {
  std::vector<std::uint8_t> is_active(entries_.size(), 0);
  for (std::size_t id : active_ids) {
    if (id >= entries_.size()) throw ValidationError("pool: unknown client id " + std::to_string(id));
    is_active[id] = 1;
  }
  std::vector<const ClientUpdate*> by_client(entries_.size(), nullptr);
  for (const auto& u : updates) {
    if (u.client_id >= entries_.size()) {
      throw ValidationError("pool: update for unknown client id " + std::to_string(u.client_id));
    }
    if (is_active[u.client_id] == 0) {
      throw ValidationError("pool: update from client " + std::to_string(u.client_id) +
                            " which is not active this round");
    }
    by_client[u.client_id] = &u;
  }

  for (auto& e : entries_) {
    const bool active = is_active[e.client_id] != 0;
    const ClientUpdate* u = by_client[e.client_id];
    if (!e.present) {
      if (!active || u == nullptr) continue;
      e.present = true;
      e.first_seen = t;
      e.tau = t;
      e.state = PoolState::active;
    } else {
      const PoolState next = active ? PoolState::active : PoolState::idle;
      if (next != e.state) {
        (e.state == PoolState::active ? e.active_rounds : e.idle_rounds) += t - e.tau;
        e.tau = t;
        e.state = next;
      }
    }
    if (u != nullptr) {
      e.theta = u->model;
      e.z = u->aux;
    }
    e.aa = e.state == PoolState::active ? t - e.tau : 0;
    e.ia = e.state == PoolState::idle ? t - e.tau : 0;
    e.aw = age_weight(e, lambda_aa_, lambda_ia_);
  }
}

std::vector<const PoolEntry*> KnowledgePool::present() const {
  std::vector<const PoolEntry*> out;
  for (const auto& e : entries_) {
    if (e.present) out.push_back(&e);
  }
  return out;
}

std::size_t KnowledgePool::size() const {
  return static_cast<std::size_t>(
      std::count_if(entries_.begin(), entries_.end(), [](const PoolEntry& e) { return e.present; }));
}

std::string KnowledgePool::snapshot_json(std::size_t t) const {
  nlohmann::json doc;
  doc["round"] = t;
  doc["lambda_aa"] = lambda_aa_;
  doc["lambda_ia"] = lambda_ia_;
  doc["class_totals"] = class_totals_;
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& e : entries_) {
    nlohmann::json c;
    c["id"] = e.client_id;
    c["present"] = e.present;
    c["state"] = e.present ? (e.state == PoolState::active ? "active" : "idle") : "unseen";
    c["tau"] = e.present ? nlohmann::json(e.tau) : nlohmann::json(nullptr);
    c["aa"] = e.aa;
    c["ia"] = e.ia;
    c["aw"] = e.aw;
    c["dw"] = e.dw;
    c["eps"] = e.eps;
    c["counts"] = e.counts;
    clients.push_back(std::move(c));
  }
  doc["clients"] = std::move(clients);
  return doc.dump(2) + "\n";
}

PoolAggregate aggregate_pool(const KnowledgePool& pool) {
  const auto members = pool.present();
  if (members.empty()) throw ValidationError("aggregate_pool: pool holds no models");
  PoolAggregate out;
  std::vector<double> raw;
  std::vector<const Vector*> thetas;
  double total = 0.0;
  for (const PoolEntry* e : members) {
    const double w = e->aw * e->eps + e->dw;
    raw.push_back(w);
    total += w;
    thetas.push_back(&e->theta.params());
    out.client_ids.push_back(e->client_id);
  }
  if (!(total > 0.0)) throw ValidationError("aggregate_pool: all pool weights are zero");
  for (double w : raw) out.weights.push_back(w / total);

  out.theta = members.front()->theta;
  out.theta.params() = weighted_average(thetas, raw);

  const Eigen::Index z_size = members.front()->z.size();
  const bool has_z = z_size > 0 && std::all_of(members.begin(), members.end(), [&](const PoolEntry* e) {
                       return e->z.size() == z_size;
                     });
  if (has_z) {
    std::vector<const Vector*> zs;
    for (const PoolEntry* e : members) zs.push_back(&e->z);
    out.z = weighted_average(zs, raw);
  }
  return out;
}

TeacherSet make_teachers(const KnowledgePool& pool) {
  const auto members = pool.present();
  const auto& totals = pool.class_totals();
  TeacherSet out;
  out.class_weights.resize(static_cast<Eigen::Index>(members.size()),
                           static_cast<Eigen::Index>(totals.size()));
  for (std::size_t m = 0; m < members.size(); ++m) {
    out.models.push_back(&members[m]->theta);
    for (std::size_t y = 0; y < totals.size(); ++y) {
      const double share = totals[y] > 0 ? static_cast<double>(members[m]->counts[y]) /
                                                static_cast<double>(totals[y])
                                          : 0.0;
      out.class_weights(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(y)) =
          members[m]->aw + share;
    }
  }
  for (Eigen::Index y = 0; y < out.class_weights.cols(); ++y) {
    const double col = out.class_weights.col(y).sum();
    if (col > 0.0) out.class_weights.col(y) /= col;
  }
  return out;
}

ConditionalGenerator::ConditionalGenerator(std::size_t num_classes, std::size_t output_dim,
                                           const GeneratorSpec& spec, Rng& rng)
    : num_classes_(num_classes), latent_dim_(spec.latent_dim), embedding_dim_(spec.embedding_dim) {
  Rng net_rng = rng.split("net");
  net_ = MlpModel::make(latent_dim_ + embedding_dim_, spec.hidden, output_dim, net_rng);
  Rng emb_rng = rng.split("embedding");
  embedding_.resize(static_cast<Eigen::Index>(num_classes_ * embedding_dim_));
  for (Eigen::Index i = 0; i < embedding_.size(); ++i) embedding_(i) = emb_rng.normal();
}

Tensor2 ConditionalGenerator::make_input(const Tensor2& z, std::span<const int> labels) const {
  if (static_cast<std::size_t>(z.cols()) != latent_dim_) throw ShapeError("generator: latent width");
  if (static_cast<std::size_t>(z.rows()) != labels.size()) throw ShapeError("generator: label count");
  const auto e = static_cast<Eigen::Index>(embedding_dim_);
  Tensor2 input(z.rows(), z.cols() + e);
  input.leftCols(z.cols()) = z;
  for (Eigen::Index b = 0; b < z.rows(); ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes_) {
      throw ValidationError("generator: label out of range");
    }
    input.row(b).tail(e) = embedding_.segment(y * e, e).transpose();
  }
  return input;
}

Tensor2 ConditionalGenerator::generate(const Tensor2& z, std::span<const int> labels) const {
  return forward(net_, make_input(z, labels)).logits;
}

GeneratorInputs sample_generator_inputs(std::size_t latent_dim, std::size_t batch,
                                        std::span<const std::size_t> class_totals, Rng& rng) {
  std::vector<double> p(class_totals.begin(), class_totals.end());
  GeneratorInputs out;
  out.labels.resize(batch);
  for (auto& y : out.labels) y = static_cast<int>(rng.discrete(p));
  out.z.resize(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(latent_dim));
  for (Eigen::Index i = 0; i < out.z.size(); ++i) out.z.data()[i] = rng.normal();
  return out;
}

GeneratedBatch sample_generator(const ConditionalGenerator& generator, std::size_t batch,
                                std::span<const std::size_t> class_totals, Rng& rng) {
  GeneratorInputs in = sample_generator_inputs(generator.latent_dim(), batch, class_totals, rng);
  GeneratedBatch out;
  out.x = generator.generate(in.z, in.labels);
  out.z = std::move(in.z);
  out.labels = std::move(in.labels);
  return out;
}

namespace {

constexpr double kNormFloor = 1e-12;
constexpr double kDivEps = 1e-8;

struct Contrastive {
  double loss = 0.0;
  Tensor2 grad_features;
};

Contrastive contrastive_loss(const Tensor2& features, const MlpModel& theta,
                             std::span<const int> labels, double tau, bool want_grad) {
  const auto head = theta.weight(theta.num_layers() - 1);  // feature_dim x classes
  Tensor2 centers = head;
  for (Eigen::Index j = 0; j < centers.cols(); ++j) {
    const double n = centers.col(j).norm();
    if (n > 0.0) centers.col(j) /= n;
  }
  const Eigen::Index rows = features.rows();
  const double inv_rows = 1.0 / static_cast<double>(rows);
  Contrastive out;
  if (want_grad) out.grad_features = Tensor2::Zero(rows, features.cols());
  for (Eigen::Index b = 0; b < rows; ++b) {
    const auto f = features.row(b);
    const double fn = std::sqrt(f.squaredNorm() + kNormFloor);
    const Eigen::RowVectorXd dots = f * centers;
    const Eigen::RowVectorXd s = dots / (fn * tau);
    const double smax = s.maxCoeff();
    const Eigen::RowVectorXd ex = (s.array() - smax).exp();
    const double z = ex.sum();
    const int y = labels[static_cast<std::size_t>(b)];
    out.loss += -(s(y) - smax - std::log(z));
    if (want_grad) {
      Eigen::RowVectorXd ds = ex / z;
      ds(y) -= 1.0;
      ds *= inv_rows;
      // d cos_j / d f = cen_j / fn - dots_j f / fn^3
      const Eigen::RowVectorXd dcen = (centers * ds.transpose()).transpose() / fn;
      const double along = (ds.array() * dots.array()).sum() / (fn * fn * fn);
      out.grad_features.row(b) = (dcen - along * f) / tau;
    }
  }
  out.loss *= inv_rows;
  return out;
}

struct Diversity {
  double loss = 0.0;
  Tensor2 grad_x;
};

Diversity diversity_loss(const Tensor2& x, const Tensor2& z, bool want_grad) {
  const Eigen::Index rows = x.rows();
  Diversity out;
  if (want_grad) out.grad_x = Tensor2::Zero(rows, x.cols());
  if (rows < 2) return out;
  const double pairs = 0.5 * static_cast<double>(rows) * static_cast<double>(rows - 1);
  Tensor2 coeff = Tensor2::Zero(rows, rows);  // d(mean ratio)/d dx_ab, scaled per pair
  double mean_ratio = 0.0;
  for (Eigen::Index a = 0; a < rows; ++a) {
    for (Eigen::Index b = a + 1; b < rows; ++b) {
      const double dx = (x.row(a) - x.row(b)).norm();
      const double dz = (z.row(a) - z.row(b)).norm() + kDivEps;
      mean_ratio += dx / dz;
      if (dx > 0.0) coeff(a, b) = 1.0 / (dz * dx);
    }
  }
  mean_ratio /= pairs;
  out.loss = std::exp(-mean_ratio);
  if (want_grad) {
    const double scale = -out.loss / pairs;
    for (Eigen::Index a = 0; a < rows; ++a) {
      for (Eigen::Index b = a + 1; b < rows; ++b) {
        if (coeff(a, b) == 0.0) continue;
        const Eigen::RowVectorXd g = (scale * coeff(a, b)) * (x.row(a) - x.row(b));
        out.grad_x.row(a) += g;
        out.grad_x.row(b) -= g;
      }
    }
  }
  return out;
}

}  // namespace

GeneratorLoss generator_loss(const ConditionalGenerator& generator, const Tensor2& z,
                             std::span<const int> labels, const TeacherSet& teachers,
                             const MlpModel& theta, const KpflConfig& cfg) {
  if (cfg.gamma_div > 0.0 && z.rows() < 2) {
    throw ValidationError("generator_loss: diversity term needs a batch of at least 2");
  }
  if (teachers.models.empty()) throw ValidationError("generator_loss: empty pool");
  if (theta.in_dim() != generator.output_dim()) {
    throw ShapeError("generator_loss: generator output does not match classifier input");
  }
  const ForwardPass gen_pass = forward_pass(generator.net(), generator.make_input(z, labels));
  const Tensor2& x = gen_pass.logits();
  const Eigen::Index rows = x.rows();
  Tensor2 grad_x = Tensor2::Zero(rows, x.cols());
  GeneratorLoss out;

  std::vector<double> w(static_cast<std::size_t>(rows));
  Tensor2 gx;
  for (std::size_t m = 0; m < teachers.models.size(); ++m) {
    for (std::size_t b = 0; b < w.size(); ++b) {
      w[b] = teachers.class_weights(static_cast<Eigen::Index>(m), labels[b]);
    }
    const ForwardPass tp = forward_pass(*teachers.models[m], x);
    const LogitLoss ce = cross_entropy(tp.logits(), labels, w);
    out.ce += ce.loss;
    if (cfg.gamma_ce > 0.0) {
      backward(*teachers.models[m], tp, ce.grad_logits, {nullptr, false, &gx});
      grad_x += cfg.gamma_ce * gx;
    }
  }

  {
    const ForwardPass tp = forward_pass(theta, x);
    const bool want = cfg.gamma_ctr > 0.0;
    Contrastive ctr = contrastive_loss(tp.features(), theta, labels, cfg.tau_temp, want);
    out.ctr = ctr.loss;
    if (want) {
      const Tensor2 zero_logits = Tensor2::Zero(tp.logits().rows(), tp.logits().cols());
      backward(theta, tp, zero_logits, {&ctr.grad_features, false, &gx});
      grad_x += cfg.gamma_ctr * gx;
    }
  }

  {
    const bool want = cfg.gamma_div > 0.0;
    Diversity div = diversity_loss(x, z, want);
    out.div = div.loss;
    if (want) grad_x += cfg.gamma_div * div.grad_x;
  }

  out.total = cfg.gamma_ce * out.ce + cfg.gamma_ctr * out.ctr + cfg.gamma_div * out.div;

  Tensor2 grad_input;
  out.net_grad = backward(generator.net(), gen_pass, grad_x, {nullptr, true, &grad_input});
  out.embedding_grad = Vector::Zero(generator.embedding().size());
  const auto e = static_cast<Eigen::Index>(generator.embedding_dim());
  const auto latent = static_cast<Eigen::Index>(generator.latent_dim());
  for (Eigen::Index b = 0; b < rows; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    out.embedding_grad.segment(y * e, e) += grad_input.row(b).segment(latent, e).transpose();
  }
  return out;
}

Tensor2 ensemble_logits(const TeacherSet& teachers, const Tensor2& x, std::span<const int> labels) {
  if (teachers.models.empty()) throw ValidationError("ensemble_logits: empty pool");
  Tensor2 out;
  for (std::size_t m = 0; m < teachers.models.size(); ++m) {
    Tensor2 logits = forward(*teachers.models[m], x).logits;
    for (Eigen::Index b = 0; b < logits.rows(); ++b) {
      logits.row(b) *= teachers.class_weights(static_cast<Eigen::Index>(m),
                                              labels[static_cast<std::size_t>(b)]);
    }
    if (m == 0) {
      out = std::move(logits);
    } else {
      out += logits;
    }
  }
  return out;
}

double distill_step(MlpModel& theta, Vector& velocity, const Tensor2& x,
                    std::span<const int> labels, const TeacherSet& teachers, const SgdConfig& sgd,
                    double temperature) {
  const Tensor2 teacher = ensemble_logits(teachers, x, labels);
  const ForwardPass pass = forward_pass(theta, x);
  const LogitLoss kl = softmax_kl_grad(teacher, pass.logits(), temperature);
  const Vector grad = backward(theta, pass, kl.grad_logits);
  sgd_step(theta, grad, sgd, velocity);
  return kl.loss;
}

DistillResult distill(const MlpModel& theta, const ConditionalGenerator& generator,
                      const TeacherSet& teachers, std::span<const std::size_t> class_totals,
                      std::size_t steps, std::size_t batch, const SgdConfig& sgd,
                      double temperature, Rng& rng) {
  DistillResult out{theta, {}};
  Vector velocity;
  for (std::size_t s = 0; s < steps; ++s) {
    const GeneratedBatch gb = sample_generator(generator, batch, class_totals, rng);
    out.losses.push_back(
        distill_step(out.refined, velocity, gb.x, gb.labels, teachers, sgd, temperature));
  }
  return out;
}

KpflPlugin::KpflPlugin(const Partition& partition, std::size_t input_dim, KpflConfig cfg, Rng rng)
    : cfg_(std::move(cfg)), pool_(partition.counts, cfg_.lambda_aa, cfg_.lambda_ia), rng_(rng) {
  cfg_.validate();
  Rng gen_rng = rng_.split("generator-init");
  generator_ = ConditionalGenerator(partition.num_classes, input_dim, cfg_.generator, gen_rng);
}

std::optional<AggregateOverride> KpflPlugin::before_aggregation(
    const RoundContext& ctx, std::span<const ClientUpdate> updates) {
  pool_.update(ctx.round, ctx.active_ids, updates);
  diag_.clear();
  diag_["pool_size"] = static_cast<double>(pool_.size());
  if (updates.empty()) return std::nullopt;
  PoolAggregate agg = aggregate_pool(pool_);
  return AggregateOverride{std::move(agg.theta), std::move(agg.z)};
}

std::optional<MlpModel> KpflPlugin::after_aggregation(const RoundContext& ctx,
                                                      const MlpModel& theta) {
  const TeacherSet teachers = make_teachers(pool_);
  if (teachers.models.empty()) return std::nullopt;
  const Rng round = rng_.split(ctx.round);

  Rng gen_rng = round.split("generator");
  gen_velocity_.resize(0);
  emb_velocity_.resize(0);
  for (std::size_t s = 0; s < cfg_.generator_steps; ++s) {
    const GeneratorInputs in = sample_generator_inputs(generator_.latent_dim(), cfg_.batch,
                                                       pool_.class_totals(), gen_rng);
    const GeneratorLoss loss = generator_loss(generator_, in.z, in.labels, teachers, theta, cfg_);
    sgd_step(generator_.net().params(), loss.net_grad, cfg_.generator_sgd, gen_velocity_);
    sgd_step(generator_.embedding(), loss.embedding_grad, cfg_.generator_sgd, emb_velocity_);
    if (s + 1 == cfg_.generator_steps) {
      diag_["gen_loss"] = loss.total;
      diag_["gen_ce"] = loss.ce;
      diag_["gen_ctr"] = loss.ctr;
      diag_["gen_div"] = loss.div;
    }
  }

  Rng distill_rng = round.split("distill");
  DistillResult refined = distill(theta, generator_, teachers, pool_.class_totals(),
                                  cfg_.distill_steps, cfg_.batch, cfg_.distill_sgd,
                                  cfg_.distill_temperature, distill_rng);
  if (!refined.losses.empty()) {
    diag_["distill_loss_first"] = refined.losses.front();
    diag_["distill_loss_last"] = refined.losses.back();
  }
  return std::move(refined.refined);
}

void KpflPlugin::add_diagnostics(std::map<std::string, double>& out) const {
  for (const auto& [k, v] : diag_) out[k] = v;
}

}  // namespace dpfl
