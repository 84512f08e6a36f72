#include <doctest.h>

#include <cmath>
#include <map>

#include "sgfn/env.hpp"
#include "sgfn/oracle.hpp"
#include "sgfn/rng.hpp"
#include "sgfn/trainer.hpp"

using namespace sgfn;

namespace {

PolicyModel make_model(const DagEnv& env, const std::string& kind, std::uint64_t seed, std::size_t hidden = 32) {
  ModelSpec spec;
  spec.kind = kind;
  spec.hidden = hidden;
  Rng rng(seed);
  return PolicyModel::create(env, spec, rng);
}

std::shared_ptr<const DagEnv> skewed_tree() {
  std::vector<double> r(9);
  for (std::size_t i = 0; i < 9; ++i) r[i] = 0.5 + static_cast<double>(i);
  return std::make_shared<RegularTree>(3, 2, r);
}

}  // namespace

TEST_CASE("threshold update") {
  const std::vector<double> four = {4.0};
  CHECK(update_threshold(1.0, four, 0.1) == doctest::Approx(1.1));
  const std::vector<double> some = {1.0, 9.0, 4.0};
  CHECK(update_threshold(7.0, some, 1.0) == doctest::Approx(3.0));
  CHECK(update_threshold(7.0, some, 1.0, Aggregation::mean) == doctest::Approx(2.0));
  CHECK(update_threshold(7.0, some, 1.0, Aggregation::median) == doctest::Approx(2.0));
  const std::vector<double> zeros = {0.0, 0.0};
  double c = 1.0;
  for (int i = 0; i < 10; ++i) {
    const double next = update_threshold(c, zeros, 0.05);
    CHECK(next < c);
    c = next;
  }
  CHECK(c == doctest::Approx(std::pow(0.95, 10)));
}

TEST_CASE("aggregation and backward-source names") {
  for (Aggregation a : {Aggregation::max, Aggregation::mean, Aggregation::median})
    CHECK(aggregation_from_string(to_string(a)) == a);
  for (BackwardSource b : {BackwardSource::buffer, BackwardSource::exact})
    CHECK(backward_source_from_string(to_string(b)) == b);
  CHECK_THROWS(aggregation_from_string("mode"));
}

TEST_CASE("top-K buffer") {
  TopKBuffer buf(2);
  CHECK(buf.insert(10, 1.0));
  CHECK(buf.insert(11, 5.0));
  CHECK(buf.insert(12, 3.0));
  REQUIRE(buf.size() == 2);
  const auto items = buf.items();
  CHECK(items[0] == std::pair<StateId, double>{11, 5.0});
  CHECK(items[1] == std::pair<StateId, double>{12, 3.0});
  CHECK_FALSE(buf.contains(10));
  CHECK_FALSE(buf.insert(12, 3.0));  // already present
  CHECK_FALSE(buf.insert(13, 2.0));  // below the minimum of a full buffer
  CHECK(buf.min_reward() == 3.0);
  CHECK(buf.total_reward() == 8.0);

  TopKBuffer one(5);
  CHECK(one.insert(1, 2.0));
  CHECK(one.states() == std::vector<StateId>{1});
}

TEST_CASE("replay buffer") {
  ReplayBuffer rb(2);
  Rng rng(1);
  CHECK_THROWS(rb.sample(1, rng));
  Trajectory a, b, c;
  a.states = {0, 1, 2};
  a.reward = 1.0;
  b.states = {0, 3, 2};
  b.reward = 3.0;
  c.states = {0, 4, 2};
  c.reward = 0.5;
  rb.insert(a);
  rb.insert(b);
  rb.insert(c);
  REQUIRE(rb.size() == 2);
  CHECK(rb.items()[0].reward == 3.0);
  CHECK(rb.items()[1].reward == 1.0);
  std::map<double, double> freq;
  const std::size_t n = 40000;
  for (const auto& t : rb.sample(n, rng)) {
    freq[t.reward] += 1.0 / n;
    CHECK(t.provenance == Provenance::replayed);
  }
  CHECK(freq[3.0] == doctest::Approx(0.75).epsilon(0.02));

  ReplayBuffer single(3);
  single.insert(a);
  for (const auto& t : single.sample(5, rng)) CHECK(t.states == a.states);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.alpha() == doctest::Approx(0.025));
  auto bad = [&](auto mutate) {
    TrainConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  };
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.beta = 0.0; });
  bad([](TrainConfig& c) { c.tv_target = 1.0; });
  bad([](TrainConfig& c) { c.epsilon = 1.0; });
  bad([](TrainConfig& c) { c.objective = Objective::db; });
  bad([](TrainConfig& c) { c.patience = 0; });
  bad([](TrainConfig& c) { c.replay_fraction = 0.5; });
  bad([](TrainConfig& c) { c.initial_threshold = -1.0; });

  RegularTree env(2, 2);
  TrainConfig db;
  db.stabilized = false;
  db.objective = Objective::db;
  CHECK_THROWS(Trainer(std::make_shared<RegularTree>(2, 2), make_model(env, "tabular", 0), db));
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto env = skewed_tree();
  TrainConfig cfg;
  cfg.max_rounds = 150;
  cfg.seed = 7;
  cfg.eval_every = 25;
  auto run = [&] {
    Trainer t(env, make_model(*env, "mlp", 3, 16), cfg);
    std::string csv;
    for (const auto& m : t.run()) csv += metrics_csv_row(m) + "\n";
    return csv;
  };
  const std::string a = run();
  CHECK(a == run());
  CHECK_FALSE(a.empty());
}

TEST_CASE("stable rounds: buffer, patience, skipping and the loss cap") {
  auto env = skewed_tree();
  TrainConfig cfg;
  cfg.max_rounds = 600;
  cfg.buffer_size = 4;
  cfg.patience = 5;
  cfg.learning_rate = 0.05;
  cfg.tv_target = 0.05;
  cfg.early_exit = false;
  cfg.eval_every = 0;
  Trainer t(env, make_model(*env, "tabular", 1), cfg);

  double last_min = 0.0;
  std::size_t since_certificate = 0, certificates = 0, skips = 0;
  while (!t.finished()) {
    const double c_before = t.state().c;
    const bool had_c = t.state().c_initialized;
    const auto sum_before = t.model().params.checksum();
    const auto m = t.step();
    ++since_certificate;

    if (t.state().buffer.size() == cfg.buffer_size) {
      CHECK(t.state().buffer.min_reward() >= last_min);
      last_min = t.state().buffer.min_reward();
    }
    CHECK(t.state().patience_counter < cfg.patience);
    if (m.certificate_computed) {
      // A certificate needs N consecutive rounds without a buffer change.
      CHECK(since_certificate >= cfg.patience);
      since_certificate = 0;
      ++certificates;
    }
    if (m.skipped) {
      ++skips;
      CHECK(t.model().params.checksum() == sum_before);
      CHECK(t.state().c == c_before);
      CHECK_FALSE(m.gradient_step);
    } else {
      CHECK(m.gradient_step);
    }
    if (had_c) CHECK(m.max_loss <= c_before * c_before + 1e-9);
    CHECK(std::isfinite(m.c));
  }
  CHECK(certificates > 0);
  CHECK(skips > 0);
}

TEST_CASE("stable training on a small tree exits with a certificate") {
  auto env = std::make_shared<RegularTree>(3, 2);
  TrainConfig cfg;
  cfg.max_rounds = 4000;
  cfg.learning_rate = 0.05;
  cfg.tv_target = 0.1;
  cfg.eval_every = 50;
  cfg.seed = 2;
  Trainer t(env, make_model(*env, "tabular", 2), cfg);
  const auto metrics = t.run();
  REQUIRE(t.state().exited);
  CHECK(metrics.size() < cfg.max_rounds);
  const auto* cert = t.last_certificate();
  REQUIRE(cert != nullptr);
  CHECK(cert->bound <= cfg.tv_target);
  CHECK(exact_tv(t.model(), *env) <= cert->bound);
}

TEST_CASE("plain TB training converges on a small tree") {
  auto env = std::make_shared<RegularTree>(3, 2);
  TrainConfig cfg;
  cfg.stabilized = false;
  cfg.max_rounds = 2000;
  cfg.learning_rate = 0.01;
  cfg.eval_every = 0;
  Trainer t(env, make_model(*env, "tabular", 4), cfg);
  t.run();
  CHECK(exact_tv(t.model(), *env) < 0.05);
}

TEST_CASE("baseline rounds are plain gradient steps on the sampled batch") {
  auto env = std::make_shared<Hypergrid>(2, 4, 0.1, 0.5, 2.0);
  TrainConfig cfg;
  cfg.stabilized = false;
  cfg.seed = 5;
  cfg.max_rounds = 5;
  cfg.eval_every = 0;
  const auto init = make_model(*env, "mlp", 6, 8);
  Trainer t(env, init, cfg);
  t.run();

  PolicyModel m = init;
  AdamOptimizer opt(m.params, cfg.learning_rate);
  opt.set_learning_rate("log_z", cfg.learning_rate * cfg.log_z_lr_multiplier);
  Rng rng = make_rng(cfg.seed, "train");
  for (std::size_t r = 0; r < cfg.max_rounds; ++r) {
    const auto batch = sample_forward_batch(m, *env, rng, cfg.batch_size, cfg.epsilon, false);
    std::vector<double> g(m.params.size(), 0.0);
    evaluate_objective(m, *env, batch, LossOptions{}, g);
    clip_grad_norm(g, cfg.grad_clip);
    opt.step(m.params, g);
  }
  CHECK(m.params == t.model().params);
}

TEST_CASE("metrics csv rows match the header") {
  auto count = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  RoundMetrics m;
  m.exact_tv = 0.25;
  CHECK(count(metrics_csv_row(m)) == count(metrics_csv_header()));
  CHECK(metrics_csv_header().rfind("round,", 0) == 0);
}
