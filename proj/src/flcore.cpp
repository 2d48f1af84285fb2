#include "dpfl/flcore.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <thread>

#include "dpfl/error.hpp"

namespace dpfl {

StrategyKind parse_strategy(std::string_view name) {
  if (name == "fedavg") return StrategyKind::fedavg;
  if (name == "fedprox") return StrategyKind::fedprox;
  if (name == "scaffold") return StrategyKind::scaffold;
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

std::string_view to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::fedavg: return "fedavg";
    case StrategyKind::fedprox: return "fedprox";
    case StrategyKind::scaffold: return "scaffold";
  }
  return "unknown";
}

void StrategyConfig::validate() const {
  if (!(prox_mu >= 0.0)) throw ConfigError("strategy: prox_mu must be >= 0");
  if (local_epochs < 1) throw ConfigError("strategy: local_epochs must be >= 1");
  sgd.validate();
}

ClientUpdate local_update(const ClientState& client, const Dataset& data, const MlpModel& global,
                          const Vector& global_aux, const StrategyConfig& cfg, Rng rng) {
  if (client.indices.empty()) {
    throw ValidationError("local_update: client " + std::to_string(client.id) + " has no data");
  }
  const bool scaffold = cfg.kind == StrategyKind::scaffold;
  const bool prox = cfg.kind == StrategyKind::fedprox && cfg.prox_mu > 0.0;

  ClientUpdate out;
  out.client_id = client.id;
  out.sample_count = client.indices.size();
  out.model = (cfg.warm_start == WarmStart::stale_local && client.last_local)
                  ? *client.last_local
                  : global;
  const Vector start = out.model.params();

  const auto n_params = static_cast<Eigen::Index>(global.num_params());
  Vector correction;
  Vector own_control = client.control.size() == n_params ? client.control : Vector::Zero(n_params);
  if (scaffold) {
    const Vector server_control = global_aux.size() == n_params ? global_aux : Vector::Zero(n_params);
    correction = server_control - own_control;
  }

  const std::size_t n = client.indices.size();
  const std::size_t batch = std::min(cfg.sgd.batch_size, n);
  out.batch_size = batch;
  std::vector<std::size_t> order = client.indices;
  std::vector<int> labels;
  std::vector<double> weights(batch, 1.0);
  Vector velocity;
  double loss_sum = 0.0;

  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    shuffle(std::span<std::size_t>(order), rng);
    for (std::size_t begin = 0; begin < n; begin += batch) {
      const std::size_t end = std::min(begin + batch, n);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      const Tensor2 x = gather_rows(data.train_x, rows);
      labels.resize(rows.size());
      for (std::size_t r = 0; r < rows.size(); ++r) labels[r] = data.train_y[rows[r]];
      LossGrad lg = backward_ce(out.model, x, labels, std::span<const double>(weights.data(), rows.size()));
      if (prox) lg.grad += cfg.prox_mu * (out.model.params() - global.params());
      if (scaffold) lg.grad += correction;
      sgd_step(out.model, lg.grad, cfg.sgd, velocity);
      loss_sum += lg.loss;
      ++out.local_steps;
    }
  }
  out.mean_loss = out.local_steps > 0 ? loss_sum / static_cast<double>(out.local_steps) : 0.0;

  if (scaffold) {
    // Displacement of K heavy-ball steps under a constant gradient g is
    // lr * g * sum_k (1 - m^k) / (1 - m); reduces to K * lr when m = 0.
    double steps = 0.0;
    double power = 1.0;
    for (std::size_t k = 0; k < out.local_steps; ++k) {
      power *= cfg.sgd.momentum;
      steps += cfg.sgd.momentum < 1.0 ? (1.0 - power) / (1.0 - cfg.sgd.momentum) : static_cast<double>(k + 1);
    }
    const double denom = steps * cfg.sgd.learning_rate;
    out.aux = own_control;
    if (denom > 0.0) {
      // c_i - c == -correction
      out.aux = -correction + (start - out.model.params()) / denom;
    }
  }
  return out;
}

Vector weighted_average(std::span<const Vector* const> items, std::span<const double> weights) {
  if (items.empty()) throw EmptyRoundError();
  if (weights.size() != items.size()) throw ShapeError("weighted_average: weight count mismatch");
  const Eigen::Index size = items.front()->size();
  for (const Vector* v : items) {
    if (v->size() != size) throw ShapeError("weighted_average: vectors differ in size");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ValidationError("weighted_average: negative weight");
    total += w;
  }
  if (!(total > 0.0)) throw ValidationError("weighted_average: weights sum to zero");

  Vector out = Vector::Zero(size);
  const bool uniform = std::all_of(weights.begin(), weights.end(),
                                   [&](double w) { return w == weights.front(); });
  if (uniform) {
    for (const Vector* v : items) out += *v;
    return out / static_cast<double>(items.size());
  }
  for (std::size_t i = 0; i < items.size(); ++i) out += (weights[i] / total) * *items[i];
  return out;
}

MlpModel aggregate(std::span<const ClientUpdate> updates, std::span<const double> weights) {
  if (updates.empty()) throw EmptyRoundError();
  std::vector<const Vector*> params;
  std::vector<double> w;
  for (std::size_t i = 0; i < updates.size(); ++i) {
    if (!updates[i].model.same_shape(updates.front().model)) {
      throw ShapeError("aggregate: client models differ in shape");
    }
    params.push_back(&updates[i].model.params());
    w.push_back(weights.empty() ? static_cast<double>(updates[i].sample_count) : weights[i]);
  }
  if (!weights.empty() && weights.size() != updates.size()) {
    throw ShapeError("aggregate: weight count mismatch");
  }
  MlpModel out = updates.front().model;
  out.params() = weighted_average(params, w);
  return out;
}

FederatedRun::FederatedRun(const Dataset& data, const Partition& partition, RunSettings settings,
                           ParticipationScheduler scheduler, Rng training_rng, RoundPlugin* plugin)
    : data_(data),
      partition_(partition),
      settings_(std::move(settings)),
      scheduler_(std::move(scheduler)),
      rng_(training_rng),
      plugin_(plugin) {
  settings_.strategy.validate();
  if (scheduler_.num_clients() != partition_.num_clients()) {
    throw ConfigError("participation model and partition disagree on the number of clients");
  }
  Rng init = rng_.split("init");
  global_ = MlpModel::make(static_cast<std::size_t>(data_.train_x.cols()), settings_.hidden,
                           data_.num_classes, init);
  const auto n_params = static_cast<Eigen::Index>(global_.num_params());
  const bool scaffold = settings_.strategy.kind == StrategyKind::scaffold;
  if (scaffold) global_aux_ = Vector::Zero(n_params);
  for (std::size_t i = 0; i < partition_.num_clients(); ++i) {
    ClientState c;
    c.id = i;
    c.indices = partition_.client_indices[i];
    c.counts = partition_.counts[i];
    if (scaffold) c.control = Vector::Zero(n_params);
    clients_.push_back(std::move(c));
  }
  sampled_.num_clients = partition_.num_clients();
}

std::vector<ClientUpdate> FederatedRun::train_active(std::size_t t,
                                                     std::span<const std::size_t> active) {
  std::vector<ClientUpdate> updates(active.size());
  const Rng round_rng = rng_.split("local").split(t);
  auto work = [&](std::size_t slot) {
    const std::size_t id = active[slot];
    updates[slot] = local_update(clients_[id], data_, global_, global_aux_, settings_.strategy,
                                 round_rng.split(id));
  };
  const std::size_t workers = std::min(settings_.workers, active.size());
  if (workers <= 1) {
    for (std::size_t s = 0; s < active.size(); ++s) work(s);
    return updates;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t s = w; s < active.size(); s += workers) work(s);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return updates;
}

const RoundRecord& FederatedRun::run_round() {
  const auto started = std::chrono::steady_clock::now();
  const std::size_t t = records_.size();

  std::vector<std::size_t> sampled = scheduler_.next(t);
  std::vector<std::uint8_t> row(partition_.num_clients(), 0);
  for (std::size_t id : sampled) row[id] = 1;
  sampled_.active.push_back(std::move(row));

  RoundRecord rec;
  rec.round = t;
  for (std::size_t id : sampled) {
    if (!clients_[id].indices.empty()) rec.active_ids.push_back(id);
  }

  std::vector<ClientUpdate> updates = train_active(t, rec.active_ids);
  RoundContext ctx{t, rec.active_ids, &data_, &partition_};
  std::optional<AggregateOverride> replaced;
  if (plugin_ != nullptr) replaced = plugin_->before_aggregation(ctx, updates);

  rec.diagnostics["num_active"] = static_cast<double>(rec.active_ids.size());
  if (updates.empty()) {
    // Empty round: Theta carried forward unchanged.
    rec.psi = records_.empty() ? accuracy_percent(global_, data_.test_x, data_.test_y)
                               : records_.back().psi;
    if (plugin_ != nullptr) rec.diagnostics["psi_theta"] = records_.empty() ? rec.psi : last_psi_theta_;
  } else {
    double loss = 0.0;
    std::size_t clamped = 0;
    for (const auto& u : updates) {
      loss += u.mean_loss;
      clamped += u.batch_size < settings_.strategy.sgd.batch_size ? 1 : 0;
    }
    rec.diagnostics["mean_local_loss"] = loss / static_cast<double>(updates.size());
    rec.diagnostics["clamped_batches"] = static_cast<double>(clamped);

    MlpModel theta = replaced ? std::move(replaced->theta) : aggregate(updates);

    if (settings_.strategy.kind == StrategyKind::scaffold) {
      Vector drift = Vector::Zero(global_aux_.size());
      for (const auto& u : updates) {
        drift += u.aux - clients_[u.client_id].control;
        clients_[u.client_id].control = u.aux;
      }
      if (replaced && replaced->aux.size() == global_aux_.size()) {
        global_aux_ = replaced->aux;
      } else {
        global_aux_ += drift / static_cast<double>(clients_.size());
      }
      rec.diagnostics["control_norm"] = global_aux_.norm();
    }
    if (settings_.strategy.warm_start == WarmStart::stale_local) {
      for (const auto& u : updates) clients_[u.client_id].last_local = u.model;
    }

    if (plugin_ != nullptr) {
      last_psi_theta_ = accuracy_percent(theta, data_.test_x, data_.test_y);
      rec.diagnostics["psi_theta"] = last_psi_theta_;
      if (auto refined = plugin_->after_aggregation(ctx, theta)) theta = std::move(*refined);
    }
    global_ = std::move(theta);
    rec.psi = accuracy_percent(global_, data_.test_x, data_.test_y);
  }
  if (plugin_ != nullptr) plugin_->add_diagnostics(rec.diagnostics);

  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  records_.push_back(std::move(rec));
  return records_.back();
}

void FederatedRun::run(std::size_t rounds) {
  for (std::size_t r = 0; r < rounds; ++r) run_round();
}

}  // namespace dpfl
