#include <doctest.h>

#include <cmath>

#include "dpfl/error.hpp"
#include "dpfl/kpfl.hpp"
#include "oracles.hpp"

using namespace dpfl;

namespace {

ClientUpdate update_for(std::size_t id, const MlpModel& model) {
  ClientUpdate u;
  u.client_id = id;
  u.model = model;
  u.sample_count = 1;
  return u;
}

/// Scalar model y = w x + b with both parameters set to `v`.
MlpModel scalar_model(double v) {
  MlpModel m({LayerShape{1, 1, Activation::identity}});
  m.params().setConstant(v);
  return m;
}

void step_pool(KnowledgePool& pool, std::size_t t, std::vector<std::size_t> active,
               const MlpModel& model) {
  std::vector<ClientUpdate> ups;
  for (std::size_t id : active) ups.push_back(update_for(id, model));
  pool.update(t, active, ups);
}

/// Deals every class round-robin so each client holds the same counts.
Partition equal_partition(const Dataset& data, std::size_t clients) {
  Partition p;
  p.alpha = 0.0;
  p.num_classes = data.num_classes;
  p.client_indices.assign(clients, {});
  p.counts.assign(clients, std::vector<std::size_t>(data.num_classes, 0));
  std::vector<std::size_t> dealt(data.num_classes, 0);
  for (std::size_t i = 0; i < data.train_y.size(); ++i) {
    const auto y = static_cast<std::size_t>(data.train_y[i]);
    const std::size_t c = dealt[y]++ % clients;
    p.client_indices[c].push_back(i);
    ++p.counts[c][y];
  }
  return p;
}

Dataset small_data(std::size_t classes, std::size_t dim, std::size_t per_class, std::uint64_t seed) {
  DatasetSpec spec;
  spec.num_classes = classes;
  spec.input_dim = dim;
  spec.samples_per_class = per_class;
  Rng rng(seed);
  return generate(spec, rng);
}

struct GenToy {
  KnowledgePool pool;
  MlpModel theta;
  ConditionalGenerator gen;
};

GenToy gen_toy(std::size_t members) {
  Rng rng(31);
  std::vector<std::size_t> hidden{6};
  std::vector<std::vector<std::size_t>> counts;
  for (std::size_t i = 0; i < members; ++i) counts.push_back({3 + i, 5 - i});
  GenToy toy{KnowledgePool(counts, -0.1, -0.1), MlpModel::make(4, hidden, 2, rng), {}};
  std::vector<ClientUpdate> ups;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < members; ++i) {
    Rng r = rng.split(i);
    ups.push_back(update_for(i, MlpModel::make(4, hidden, 2, r)));
    ids.push_back(i);
  }
  toy.pool.update(0, ids, ups);
  GeneratorSpec spec;
  spec.latent_dim = 3;
  spec.embedding_dim = 2;
  spec.hidden = {5};
  Rng grng(32);
  toy.gen = ConditionalGenerator(2, 4, spec, grng);
  return toy;
}

double generator_objective(ConditionalGenerator gen, const Vector& flat, const GeneratorInputs& in,
                           const TeacherSet& teachers, const MlpModel& theta, const KpflConfig& cfg) {
  const auto n = gen.net().params().size();
  gen.net().params() = flat.head(n);
  gen.embedding() = flat.tail(flat.size() - n);
  return generator_loss(gen, in.z, in.labels, teachers, theta, cfg).total;
}

}  // namespace

TEST_SUITE("kpfl") {
  TEST_CASE("age bookkeeping: staying active ages, a flip resets tau") {
    KnowledgePool pool({{1, 1}, {1, 1}}, -0.1, -0.1);
    const MlpModel m = scalar_model(0.0);
    step_pool(pool, 0, {0, 1}, m);
    step_pool(pool, 1, {0, 1}, m);
    CHECK(pool.entries()[0].tau == 0);
    CHECK(pool.entries()[0].aa == 1);
    step_pool(pool, 2, {0, 1}, m);
    CHECK(pool.entries()[0].tau == 0);
    CHECK(pool.entries()[0].aa == 2);
    step_pool(pool, 3, {0}, m);
    CHECK(pool.entries()[1].state == PoolState::idle);
    CHECK(pool.entries()[1].tau == 3);
    CHECK(pool.entries()[1].ia == 0);
    CHECK(pool.entries()[1].active_rounds == 3);
  }

  TEST_CASE("alternating participation keeps both ages at most 1") {
    KnowledgePool pool({{1, 1}}, -0.1, -0.1);
    const MlpModel m = scalar_model(0.0);
    for (std::size_t t = 0; t < 8; ++t) {
      step_pool(pool, t, t % 2 == 0 ? std::vector<std::size_t>{0} : std::vector<std::size_t>{}, m);
      CHECK(pool.entries()[0].aa <= 1);
      CHECK(pool.entries()[0].ia <= 1);
    }
  }

  TEST_CASE("clients enter the pool on first participation") {
    KnowledgePool pool({{1, 0}, {0, 1}, {1, 1}}, -0.1, -0.1);
    step_pool(pool, 0, {1}, scalar_model(1.0));
    CHECK(pool.size() == 1);
    CHECK(pool.present().front()->client_id == 1);
    CHECK_THROWS_AS(step_pool(pool, 1, {5}, scalar_model(1.0)), ValidationError);
  }

  TEST_CASE("age weight") {
    PoolEntry e;
    e.state = PoolState::active;
    CHECK(age_weight(e, -0.1, -0.1) == 1.0);
    e.state = PoolState::idle;
    e.ia = 10;
    CHECK(age_weight(e, -0.1, -0.1) == doctest::Approx(0.36787944117144233).epsilon(1e-14));
    CHECK(age_weight(e, 0.0, 0.0) == 1.0);
    e.aa = 40;
    e.state = PoolState::active;
    CHECK(age_weight(e, 0.0, 0.0) == 1.0);
    // Doubling ia multiplies the age term by exp(lambda_ia * ia).
    PoolEntry d = e;
    d.state = PoolState::idle;
    d.ia = 20;
    e.state = PoolState::idle;
    CHECK(age_weight(d, 0.0, -0.1) / age_weight(e, 0.0, -0.1) ==
          doctest::Approx(std::exp(-0.1 * 10)).epsilon(1e-12));
  }

  TEST_CASE("data bias weight") {
    const std::vector<std::size_t> totals{4, 6, 2};
    CHECK(data_bias_weight(totals, totals) == 3.0);
    const std::vector<std::size_t> half{5, 5}, half_totals{10, 10};
    CHECK(data_bias_weight(half, half_totals) == 1.0);
    const std::vector<std::size_t> none{0, 0, 0};
    CHECK(data_bias_weight(none, totals) == 0.0);
  }

  TEST_CASE("symmetric pool aggregates to the plain average") {
    KnowledgePool pool({{2, 2}, {2, 2}, {2, 2}, {2, 2}}, -0.1, -0.1);
    std::vector<ClientUpdate> ups;
    for (std::size_t i = 0; i < 4; ++i) ups.push_back(update_for(i, scalar_model(double(i))));
    const std::vector<std::size_t> ids{0, 1, 2, 3};
    pool.update(0, ids, ups);
    const auto agg = aggregate_pool(pool);
    for (double w : agg.weights) CHECK(w == 0.25);
    CHECK(agg.theta.params()[0] == 1.5);
  }

  TEST_CASE("two-client weighting matches the scalar oracle") {
    // aw = (1, e^-1), eps = (0.5, 0.5), dw = (1, 1)
    KnowledgePool pool({{3, 5}, {3, 5}}, 0.0, -0.1);
    std::vector<ClientUpdate> ups{update_for(0, scalar_model(0.0)), update_for(1, scalar_model(4.0))};
    const std::vector<std::size_t> both{0, 1};
    pool.update(0, both, ups);
    for (std::size_t t = 1; t <= 11; ++t) step_pool(pool, t, {0}, scalar_model(0.0));
    REQUIRE(pool.entries()[1].ia == 10);
    CHECK(pool.entries()[0].aw == 1.0);
    const auto agg = aggregate_pool(pool);
    const double raw0 = 1.0 * 0.5 + 1.0;
    const double raw1 = std::exp(-1.0) * 0.5 + 1.0;
    CHECK(raw1 == doctest::Approx(1.18393972058572).epsilon(1e-13));
    const double w0 = raw0 / (raw0 + raw1), w1 = raw1 / (raw0 + raw1);
    CHECK(w0 == doctest::Approx(0.55887991).epsilon(1e-8));
    CHECK(std::abs(agg.weights[0] - w0) < 1e-12);
    CHECK(std::abs(agg.weights[1] - w1) < 1e-12);
    CHECK(std::abs(agg.theta.params()[0] - (w0 * 0.0 + w1 * 4.0)) < 1e-12);
  }

  TEST_CASE("generator inputs: single class, frequencies and determinism") {
    const std::vector<std::size_t> single{0, 7, 0};
    Rng r0(1);
    for (int y : sample_generator_inputs(4, 50, single, r0).labels) CHECK(y == 1);

    const std::vector<std::size_t> totals{1, 2, 3, 4};
    Rng r1(2);
    const std::size_t n = 100000;
    const auto in = sample_generator_inputs(1, n, totals, r1);
    std::vector<double> freq(4, 0.0);
    for (int y : in.labels) freq[static_cast<std::size_t>(y)] += 1.0;
    for (std::size_t k = 0; k < 4; ++k) {
      const double p = static_cast<double>(totals[k]) / 10.0;
      CHECK(std::abs(freq[k] - n * p) <= 4.0 * std::sqrt(n * p * (1.0 - p)));
    }

    Rng a(3), b(3);
    const auto x = sample_generator_inputs(4, 16, totals, a);
    const auto y = sample_generator_inputs(4, 16, totals, b);
    CHECK(x.z == y.z);
    CHECK(x.labels == y.labels);
  }

  TEST_CASE("generator loss reduces to plain CE for a single full-data teacher") {
    auto toy = gen_toy(1);
    KpflConfig cfg;
    cfg.gamma_ctr = 0.0;
    cfg.gamma_div = 0.0;
    cfg.lambda_aa = cfg.lambda_ia = 0.0;
    const TeacherSet teachers = make_teachers(toy.pool);
    Rng rng(4);
    const auto in = sample_generator_inputs(3, 12, toy.pool.class_totals(), rng);
    const auto loss = generator_loss(toy.gen, in.z, in.labels, teachers, toy.theta, cfg);
    const Tensor2 x = toy.gen.generate(in.z, in.labels);
    const std::vector<double> ones(12, 1.0);
    const auto ce = cross_entropy(forward(*teachers.models[0], x).logits, in.labels, ones);
    CHECK(loss.total == doctest::Approx(ce.loss).epsilon(1e-14));
  }

  TEST_CASE("collapsed generator outputs give the maximal diversity loss") {
    auto toy = gen_toy(2);
    toy.gen.net().params().setZero();
    toy.gen.net().bias(toy.gen.net().num_layers() - 1).setConstant(0.3);
    KpflConfig cfg;
    Rng rng(5);
    const auto in = sample_generator_inputs(3, 8, toy.pool.class_totals(), rng);
    const auto loss = generator_loss(toy.gen, in.z, in.labels, make_teachers(toy.pool), toy.theta, cfg);
    CHECK(loss.div == 1.0);
  }

  TEST_CASE("generator gradients match finite differences") {
    auto toy = gen_toy(2);
    const TeacherSet teachers = make_teachers(toy.pool);
    Rng rng(6);
    const auto in = sample_generator_inputs(3, 10, toy.pool.class_totals(), rng);
    const std::vector<std::array<double, 3>> mixes{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0.5, 0.5}};
    for (const auto& mix : mixes) {
      KpflConfig cfg;
      cfg.gamma_ce = mix[0];
      cfg.gamma_ctr = mix[1];
      cfg.gamma_div = mix[2];
      const auto loss = generator_loss(toy.gen, in.z, in.labels, teachers, toy.theta, cfg);
      Vector flat(loss.net_grad.size() + loss.embedding_grad.size());
      flat << toy.gen.net().params(), toy.gen.embedding();
      Vector grad(flat.size());
      grad << loss.net_grad, loss.embedding_grad;
      auto f = [&](const Vector& p) {
        return generator_objective(toy.gen, p, in, teachers, toy.theta, cfg);
      };
      const auto rep = oracle::check_gradient(f, flat, grad);
      CAPTURE(mix[0]);
      CAPTURE(mix[1]);
      CAPTURE(rep.worst_rel);
      CHECK(rep.failures == 0);
    }
  }

  TEST_CASE("diversity term needs a batch of at least two") {
    auto toy = gen_toy(1);
    KpflConfig cfg;
    Rng rng(7);
    const auto in = sample_generator_inputs(3, 1, toy.pool.class_totals(), rng);
    CHECK_THROWS_AS(generator_loss(toy.gen, in.z, in.labels, make_teachers(toy.pool), toy.theta, cfg),
                    ValidationError);
    cfg.batch = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }

  TEST_CASE("distillation: zero steps and the single-teacher fixed point") {
    auto toy = gen_toy(1);
    const TeacherSet teachers = make_teachers(toy.pool);
    Rng rng(8);
    const auto none = distill(toy.theta, toy.gen, teachers, toy.pool.class_totals(), 0, 16,
                              SgdConfig{0.01, 0.9, 0.0, 16}, 1.0, rng);
    CHECK(none.refined.params() == toy.theta.params());

    const MlpModel& student = *teachers.models[0];
    const auto fixed = distill(student, toy.gen, teachers, toy.pool.class_totals(), 10, 16,
                               SgdConfig{0.05, 0.9, 0.0, 16}, 1.0, rng);
    for (double l : fixed.losses) CHECK(std::abs(l) < 1e-12);
    CHECK((fixed.refined.params() - student.params()).cwiseAbs().maxCoeff() < 1e-9);
  }

  TEST_CASE("distillation KL gradient matches finite differences") {
    auto toy = gen_toy(2);
    const TeacherSet teachers = make_teachers(toy.pool);
    Rng rng(9);
    const auto gb = sample_generator(toy.gen, 12, toy.pool.class_totals(), rng);
    const Tensor2 teacher = ensemble_logits(teachers, gb.x, gb.labels);
    const auto pass = forward_pass(toy.theta, gb.x);
    const Vector grad = backward(toy.theta, pass, softmax_kl_grad(teacher, pass.logits()).grad_logits);
    auto f = [&](const Vector& p) {
      MlpModel c = toy.theta;
      c.params() = p;
      return softmax_kl(teacher, forward(c, gb.x).logits);
    };
    CHECK(oracle::check_gradient(f, toy.theta.params(), grad).failures == 0);
  }

  TEST_CASE("distillation loss decreases over the first 10 steps on a fixed batch") {
    auto toy = gen_toy(2);
    const TeacherSet teachers = make_teachers(toy.pool);
    Rng rng(10);
    const auto gb = sample_generator(toy.gen, 32, toy.pool.class_totals(), rng);
    MlpModel theta = toy.theta;
    Vector velocity;
    const KpflConfig cfg;
    std::vector<double> losses;
    for (int s = 0; s < 11; ++s) {
      losses.push_back(distill_step(theta, velocity, gb.x, gb.labels, teachers, cfg.distill_sgd,
                                    cfg.distill_temperature));
    }
    for (std::size_t s = 1; s < losses.size(); ++s) CHECK(losses[s] < losses[s - 1]);
  }

  TEST_CASE("full reduction: KPFL with neutral settings is bitwise FedAvg") {
    const Dataset data = small_data(3, 4, 40, 11);
    const Partition part = equal_partition(data, 4);
    RunSettings s;
    s.strategy.local_epochs = 1;
    s.strategy.sgd.batch_size = 8;
    s.hidden = {8};
    KpflConfig cfg;
    cfg.lambda_aa = cfg.lambda_ia = 0.0;
    cfg.generator_steps = 0;
    cfg.distill_steps = 0;
    KpflPlugin plugin(part, 4, cfg, Rng(12));
    FederatedRun plain(data, part, s, ParticipationScheduler(StaticParticipation{}, 4, Rng(1)), Rng(2));
    FederatedRun kpfl(data, part, s, ParticipationScheduler(StaticParticipation{}, 4, Rng(1)), Rng(2),
                      &plugin);
    for (int t = 0; t < 5; ++t) {
      plain.run_round();
      kpfl.run_round();
      CHECK(plain.global_model().params() == kpfl.global_model().params());
      CHECK(plain.records().back().psi == kpfl.records().back().psi);
    }
  }

  TEST_CASE("plugin runs end-to-end on fedprox and scaffold") {
    const Dataset data = small_data(3, 4, 40, 13);
    Rng prng(14);
    const Partition part = partition_dirichlet(data, 4, 0.3, prng);
    for (auto kind : {StrategyKind::fedprox, StrategyKind::scaffold}) {
      RunSettings s;
      s.strategy.kind = kind;
      s.strategy.local_epochs = 1;
      s.strategy.sgd.batch_size = 8;
      s.hidden = {8};
      KpflConfig cfg;
      cfg.generator_steps = 3;
      cfg.distill_steps = 3;
      cfg.batch = 8;
      KpflPlugin plugin(part, 4, cfg, Rng(15));
      FederatedRun run(data, part, s, ParticipationScheduler(TimedRandom{}, 4, Rng(1)), Rng(2), &plugin);
      run.run(4);
      CHECK(run.records().size() == 4);
      CHECK(plugin.pool().size() >= 1);
      CHECK(std::isfinite(run.records().back().psi));
      CHECK(run.records().back().diagnostics.count("psi_theta") == 1);
    }
  }
}
