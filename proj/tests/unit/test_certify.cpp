#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "sgfn/certify.hpp"
#include "sgfn/env.hpp"
#include "sgfn/oracle.hpp"

using namespace sgfn;

namespace {

std::vector<FlowSample> samples_with_ratios(const std::vector<double>& ratios, StateId terminal = 1) {
  std::vector<FlowSample> out;
  for (double r : ratios) out.push_back(FlowSample{0.7 + r, 0.7, terminal});
  return out;
}

// Closed form of the reference main term written out independently.
double main_term(double c, double M) {
  return (std::exp(c) + std::expm1(c) * M) / (std::exp(-c) - (1.0 - std::exp(-c)) * M) - 1.0;
}

}  // namespace

TEST_CASE("loss-to-TV bound") {
  CHECK(tv_bound_from_loss(0.0, LossScope::trajectory) == 0.0);
  CHECK(tv_bound_from_loss(std::log(2.0), LossScope::trajectory) == doctest::Approx(0.75));
  CHECK(tv_bound_from_loss(0.1, LossScope::transition, 5) == doctest::Approx(1.0 - std::exp(-1.0)));
  CHECK(tv_bound_from_loss(0.1, LossScope::transition, 5) == doctest::Approx(0.6321).epsilon(1e-4));
  CHECK_THROWS(tv_bound_from_loss(0.1, LossScope::transition));
  CHECK_THROWS(tv_bound_from_loss(-0.1, LossScope::trajectory));
}

TEST_CASE("sampling certificate without reference flow") {
  CHECK(pac_sampling_term(0.025, 1000, 1000) == doctest::Approx(2.0 * std::log(40.0) / 1000.0));
  CHECK(pac_tv_bound(0.0, 1'000'000'000'000ULL, 1'000'000'000'000ULL, 0.025) < 1e-10);
  CHECK(pac_tv_bound(0.01, 1000, 1000, 0.025) == doctest::Approx(0.027579).epsilon(1e-4));
  CHECK(pac_tv_bound_raw(0.5, 100, 100, 0.05) == doctest::Approx(1.7783).epsilon(1e-4));
  CHECK(pac_tv_bound(0.5, 100, 100, 0.05) == 1.0);
  CHECK_THROWS(pac_tv_bound(0.1, 100, 100, 0.5));
  CHECK_THROWS(pac_tv_bound(0.1, 100, 100, 0.0));
  CHECK_THROWS(pac_tv_bound(0.1, 0, 100, 0.05));
  CHECK(alpha_from_confidence(0.95) == doctest::Approx(0.025));
  CHECK_THROWS(alpha_from_confidence(1.0));
}

TEST_CASE("reference-flow main term") {
  CHECK(main_term(0.1, 0.05) == doctest::Approx(1.110429 / 0.900079 - 1.0).epsilon(1e-5));
  CHECK(reference_main_term(0.1, 0.05).value() == doctest::Approx(0.23370).epsilon(1e-4));
  const auto rb = pac_tv_bound_with_reference(0.1, 0.05, 1000, 1000, 0.025);
  CHECK(rb.condition_ok);
  CHECK(rb.raw == doctest::Approx(0.24108).epsilon(1e-4));
  CHECK(rb.raw == doctest::Approx(main_term(0.1, 0.05) + 2 * std::log(40.0) / 1000).epsilon(1e-12));

  const double boundary = 1.0 / std::expm1(0.1);
  CHECK(boundary == doctest::Approx(9.508).epsilon(1e-3));
  CHECK_FALSE(reference_main_term(0.1, boundary).has_value());
  CHECK_FALSE(pac_tv_bound_with_reference(0.1, boundary, 1000, 1000, 0.025).condition_ok);
  CHECK(pac_tv_bound_with_reference(0.1, boundary, 1000, 1000, 0.025).bound == 1.0);

  // M = 0 reduces to the plain bound exactly.
  for (double c : {0.0, 0.003, 0.01, 0.2, 0.7}) {
    const auto r = pac_tv_bound_with_reference(c, 0.0, 500, 800, 0.05);
    CHECK(r.raw == pac_tv_bound_raw(c, 500, 800, 0.05));
    CHECK(r.bound == pac_tv_bound(c, 500, 800, 0.05));
  }
}

TEST_CASE("fidelity trade-off bound") {
  CHECK(fidelity_tradeoff_bound(0.3, 0.0) == doctest::Approx(tv_bound_from_loss(0.3, LossScope::trajectory)));
  CHECK(fidelity_tradeoff_bound_raw(std::log(2.0), 0.5) == doctest::Approx(1.125));
  CHECK(fidelity_tradeoff_bound(std::log(2.0), 0.5) == 1.0);
  CHECK(fidelity_tradeoff_bound(0.05, 0.1) == doctest::Approx(0.10468).epsilon(1e-4));
}

TEST_CASE("max delta ratio and Monte-Carlo estimator") {
  const auto balanced = samples_with_ratios({0.0, 0.01, -0.02});
  CHECK(max_delta_ratio(balanced, 0.05) == 0.0);
  CHECK(mc_delta_over_zstar(balanced, 0.05).mean == 0.0);

  // Model flow 2.3, target flow 1, c = ln 2: delta = (2.3 - 2) / (2 - 1) = 0.3.
  std::vector<FlowSample> one = {FlowSample{std::log(2.3), 0.0, 1}};
  const auto est = mc_delta_over_zstar(one, std::log(2.0));
  CHECK(est.mean == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(est.samples == 1);
  CHECK(max_delta_ratio(one, std::log(2.0)) == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("flow samples from trajectories") {
  Trajectory t;
  t.states = {0, 1, 2};
  t.log_pf = -1.5;
  t.log_pb = -0.25;
  t.reward = 2.0;
  const auto s = flow_sample(t, 0.4);
  CHECK(s.log_model_flow == doctest::Approx(-1.1));
  CHECK(s.log_target_flow == doctest::Approx(std::log(2.0) - 0.25));
  CHECK(s.terminal == 1);
}

TEST_CASE("optimized certificate") {
  const double alpha = 0.025;
  SUBCASE("small losses: c at most 0.01 and the plain bound") {
    const auto b = samples_with_ratios({0.004, -0.01, 0.002, 0.0});
    const auto f = samples_with_ratios({-0.003, 0.006, 0.01});
    const auto rep = optimize_certificate(b, f, alpha);
    CHECK(rep.status == "ok");
    CHECK(rep.c <= 0.01 + 1e-12);
    CHECK(rep.c_hi == doctest::Approx(0.01));
    CHECK(rep.bound <= pac_tv_bound(0.01, 4, 3, alpha) + 1e-12);
    CHECK(rep.m == 4);
    CHECK(rep.n == 3);
    CHECK(rep.optimized);
  }
  SUBCASE("one outlier among balanced samples: interior optimum matching a grid scan") {
    std::vector<double> rb(300, 0.0), rf(300, 0.0);
    Rng rng(3);
    for (auto* v : {&rb, &rf})
      for (double& x : *v) x = 0.02 * (uniform01(rng) - 0.5);
    rf[17] = -3.0;
    const auto b = samples_with_ratios(rb);
    const auto f = samples_with_ratios(rf);
    const auto rep = optimize_certificate(b, f, alpha);
    REQUIRE(rep.status == "ok");
    CHECK(rep.c > rep.c_lo);
    CHECK(rep.c < rep.c_hi);
    CHECK(rep.bound < certificate_objective(rep.c_lo, b, f, alpha));
    CHECK(rep.raw_bound < certificate_objective(rep.c_hi, b, f, alpha));
    double grid_min = INFINITY;
    for (int i = 0; i <= 200; ++i) {
      const double c = rep.c_lo + (rep.c_hi - rep.c_lo) * i / 200.0;
      grid_min = std::min(grid_min, certificate_objective(c, b, f, alpha));
    }
    CHECK(rep.raw_bound <= grid_min + 1e-6);
    CHECK(rep.raw_bound == doctest::Approx(certificate_objective(rep.c, b, f, alpha)).epsilon(1e-12));
    CHECK_FALSE(rep.trace.empty());
  }
  SUBCASE("a single perfectly balanced trajectory") {
    const auto b = samples_with_ratios({0.0});
    const auto f = samples_with_ratios({0.0});
    const auto rep = optimize_certificate(b, f, alpha);
    CHECK(rep.c_hi == 0.0);
    CHECK(rep.c == 0.0);
    CHECK(rep.raw_bound == doctest::Approx(pac_sampling_term(alpha, 1, 1)));
    CHECK(rep.bound == 1.0);
  }
  SUBCASE("no forward samples") {
    const auto b = samples_with_ratios({0.0});
    CHECK_THROWS(optimize_certificate(b, {}, alpha));
  }
}

TEST_CASE("subgraph certificate") {
  const double alpha = 0.025;
  std::vector<FlowSample> b, f;
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    b.push_back({0.01 * uniform01(rng), 0.0, static_cast<StateId>(1 + i % 3)});
    f.push_back({0.01 * uniform01(rng), 0.0, static_cast<StateId>(1 + i % 5)});
  }
  SUBCASE("full support equals the global certificate") {
    const std::vector<StateId> all = {1, 2, 3, 4, 5};
    const auto sub = subgraph_certificate(all, b, f, alpha, 0.0, 5.0, true);
    const auto glob = optimize_certificate(b, f, alpha);
    CHECK(sub.bound == glob.bound);
    CHECK(sub.c == glob.c);
    CHECK(sub.scope == "subgraph");
    CHECK(sub.captured_reward == 5.0);
  }
  SUBCASE("forward samples outside the subgraph are discarded") {
    const std::vector<StateId> some = {1, 2, 3};
    const auto sub = subgraph_certificate(some, b, f, alpha, 0.0, 3.0, false, 0.02);
    std::size_t inside = 0;
    for (const auto& s : f) inside += s.terminal <= 3 ? 1 : 0;
    CHECK(sub.n == inside);
    CHECK(sub.m == b.size());
    CHECK(sub.c == 0.02);
    CHECK_FALSE(sub.optimized);
  }
  SUBCASE("empty forward intersection") {
    const std::vector<StateId> none = {99};
    const auto sub = subgraph_certificate(none, b, f, alpha, 0.0, 1.0, true);
    CHECK(sub.status == "no_forward_samples");
    CHECK_FALSE(sub.has_bound());
  }
}

TEST_CASE("incremental reward sandwich") {
  SUBCASE("no added reward") {
    const std::vector<double> r = {1.0, 2.0}, a = {0.0, 0.0};
    const auto s = incremental_tv_sandwich(r, a);
    CHECK(s.lower == 0.0);
    CHECK(s.upper == 0.0);
    CHECK(s.exact == 0.0);
    CHECK(loss_supremum(r, a) == 0.0);
  }
  SUBCASE("one promoted leaf on a 9-leaf tree") {
    std::vector<double> r(9, 1.0), a(9, 0.0);
    r[8] = 0.1;
    a[8] = 0.9;
    const auto cs = contrast_summary(r, a);
    CHECK(cs.z_prev == doctest::Approx(8.1));
    CHECK(cs.z_new == doctest::Approx(9.0));
    CHECK(cs.z_sub_prev == doctest::Approx(0.1));
    CHECK(cs.lambda_x == doctest::Approx(0.9));
    const auto s = incremental_tv_sandwich(r, a);
    CHECK(s.lower == doctest::Approx(8.0 / 8.1 * 0.1).epsilon(1e-12));
    CHECK(s.upper == doctest::Approx(0.1).epsilon(1e-12));
    // Hand computation: eight leaves drop from 1/8.1 to 1/9, one rises from 0.1/8.1 to 1/9.
    const double hand = 0.5 * (8.0 * (1.0 / 8.1 - 1.0 / 9.0) + (1.0 / 9.0 - 0.1 / 8.1));
    CHECK(s.exact == doctest::Approx(hand).epsilon(1e-12));
    CHECK(s.exact == doctest::Approx(one_more_mode_tv_closed_form(3, 2, 0.1)).epsilon(1e-12));
    CHECK(s.exact == doctest::Approx(0.09877).epsilon(1e-4));
    CHECK(loss_supremum(r, a) == doctest::Approx(std::pow(std::log(0.1), 2)).epsilon(1e-12));
  }
  SUBCASE("doubling every reward") {
    const std::vector<double> r = {1.0, 2.0, 0.5};
    const auto s = incremental_tv_sandwich(r, r);
    CHECK(contrast_summary(r, r).lambda_x == doctest::Approx(0.5));
    CHECK(s.upper == doctest::Approx(0.5));
    CHECK(s.exact == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(s.lower == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("loss supremum of a single quadrupled reward") {
    const std::vector<double> r = {1.0}, a = {3.0};
    CHECK(loss_supremum(r, a) == doctest::Approx(std::pow(std::log(0.25), 2)));
    CHECK(loss_supremum(r, a) == doctest::Approx(1.92181).epsilon(1e-5));
  }
}

TEST_CASE("target sampler draws proportionally to weight") {
  TargetSampler s({7, 3, 5}, {1.0, 2.0, 5.0});
  CHECK(s.total_weight() == doctest::Approx(8.0));
  CHECK(std::is_sorted(s.support().begin(), s.support().end()));
  Rng rng(11);
  std::map<StateId, double> freq;
  const std::size_t n = 200000;
  for (StateId x : s.sample(rng, n)) freq[x] += 1.0 / n;
  CHECK(freq[3] == doctest::Approx(2.0 / 8.0).epsilon(0.02));
  CHECK(freq[5] == doctest::Approx(5.0 / 8.0).epsilon(0.02));
  CHECK(freq[7] == doctest::Approx(1.0 / 8.0).epsilon(0.03));
  CHECK_THROWS(TargetSampler({1}, {0.0}));
  CHECK_THROWS(TargetSampler({1, 2}, {1.0}));

  RegularTree env(2, 2, {1.0, 1.0, 1.0, 5.0});
  const auto es = TargetSampler::from_env(env);
  CHECK(es.total_weight() == doctest::Approx(8.0));
  CHECK(es.support().size() == 4);
}
