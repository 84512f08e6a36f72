#include <doctest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "sgfn/certify.hpp"
#include "sgfn/env.hpp"
#include "sgfn/oracle.hpp"
#include "sgfn/policy.hpp"

using namespace sgfn;

namespace {

PolicyModel uniform_model(const DagEnv& env) {
  ModelSpec spec;
  spec.kind = "tabular";
  Rng rng(0);
  return PolicyModel::create(env, spec, rng);
}

}  // namespace

TEST_CASE("exact TV examples") {
  RegularTree env(2, 1, {1.0, 2.0});
  CHECK(exact_tv(uniform_model(env), env) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));

  const auto omm = one_more_mode_tree(3, 2, 0.1);
  const auto converged = balanced_tabular_model(*omm.previous);
  CHECK(exact_tv(converged, *omm.previous) < 1e-12);
  CHECK(exact_tv(converged, *omm.promoted) == doctest::Approx(0.09877).epsilon(1e-4));
}

TEST_CASE("exact TV is half the total L1") {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    Hypergrid env(2, 4, 0.1, 0.5, 2.0);
    const auto m = random_tabular_model(env, rng, 1.0 + i * 0.2);
    CHECK(std::abs(exact_tv(m, env) - 0.5 * exact_total_l1(m, env)) < 1e-12);
  }
}

TEST_CASE("target distribution") {
  Hypergrid env(2, 5, 0.1, 0.5, 2.0);
  const auto d = target_distribution(env);
  CHECK(std::accumulate(d.probs.begin(), d.probs.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  const double z = true_partition_function(env);
  for (std::size_t i = 0; i < d.states.size(); ++i) CHECK(d.probs[i] == doctest::Approx(env.reward(d.states[i]) / z));
}

TEST_CASE("empirical total L1") {
  RegularTree env(3, 2);
  const std::vector<StateId> point(500, env.leaf(0));
  CHECK(empirical_total_l1(point, env) == doctest::Approx(16.0 / 9.0).epsilon(1e-12));

  const std::vector<StateId> all = {4, 5, 6, 7, 8, 9, 10, 11, 12};
  CHECK(empirical_total_l1(all, env) < 1e-12);

  Hypergrid g(2, 8, 0.1, 0.5, 2.0);
  const auto sampler = TargetSampler::from_env(g);
  Rng rng(2);
  double previous = INFINITY;
  for (std::size_t n : {1000u, 10000u, 100000u}) {
    const auto xs = sampler.sample(rng, n);
    const double l1 = empirical_total_l1(xs, g);
    CHECK(l1 < previous);
    previous = l1;
  }
  CHECK(previous < 0.05);
}

TEST_CASE("mode counting") {
  Hypergrid g(2, 8, 0.1, 0.5, 2.0);
  CHECK(count_modes(std::vector<StateId>{}, g) == 0);
  CHECK(count_mode_regions(std::vector<StateId>{}, g) == 0);
  const std::size_t corner[] = {0, 0}, far[] = {7, 7}, mid[] = {3, 4};
  const StateId a = g.terminal_of(corner), b = g.terminal_of(far), c = g.terminal_of(mid);
  CHECK(count_modes(std::vector<StateId>{a, a, a}, g) == 1);
  CHECK(count_modes(std::vector<StateId>{a, b, c}, g) == 2);
  CHECK(count_mode_regions(std::vector<StateId>{a, b, c, b}, g) == 2);
  CHECK(total_mode_regions(g) == 4);
  CHECK(total_mode_regions(Hypergrid(3, 8, 0.1, 0.5, 2.0)) == 8);
}

TEST_CASE("balanced tabular model") {
  RegularTree env(2, 1, {1.0, 2.0});
  const auto m = balanced_tabular_model(env);
  const auto table = forward_policy_table(m, env);
  REQUIRE(table[0].size() == 2);
  CHECK(table[0][0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(table[0][1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(std::exp(m.log_z()) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(max_trajectory_tb_loss(m, env) < 1e-20);
  CHECK(exact_delta_over_zstar(m, env, 1e-9) == 0.0);

  Hypergrid g(2, 4, 0.1, 0.5, 2.0);
  const auto mg = balanced_tabular_model(g);
  CHECK(exact_tv(mg, g) < 1e-12);
  CHECK(max_trajectory_tb_loss(mg, g) < 1e-20);
}

TEST_CASE("path enumeration counts") {
  CHECK(enumerate_paths(RegularTree(2, 3)).size() == 8);
  CHECK(enumerate_paths(RegularTree(3, 3)).size() == 27);
  // Monotone lattice paths into each cell of a 3x3 grid: sum of C(x + y, x).
  CHECK(enumerate_paths(Hypergrid(2, 3, 0.1, 0.5, 2.0)).size() == 19);
  CHECK_THROWS(enumerate_paths(Hypergrid(2, 6, 0.1, 0.5, 2.0), 10));
}

TEST_CASE("exact flows equal sums of trajectory flows") {
  Hypergrid env(2, 4, 0.1, 0.5, 2.0);
  const auto flows = exact_flows(env);
  CHECK(flows.z_star == doctest::Approx(true_partition_function(env)).epsilon(1e-12));
  CHECK(flows.state_flow[env.initial_state()] == doctest::Approx(flows.z_star).epsilon(1e-12));

  // Uniform backward policy: a path's flow is R(x) times the product of 1/|parents|.
  std::vector<double> through(env.num_states(), 0.0);
  std::map<std::pair<StateId, StateId>, double> edge;
  for (const auto& p : enumerate_paths(env)) {
    const StateId x = p[p.size() - 2];
    double f = env.reward(x);
    for (std::size_t t = 1; t + 1 < p.size(); ++t) f /= static_cast<double>(env.parents(p[t]).size());
    for (StateId s : p) through[s] += f;
    for (std::size_t t = 0; t + 1 < p.size(); ++t) edge[{p[t], p[t + 1]}] += f;
  }
  for (std::size_t s = 0; s < env.num_states(); ++s) {
    CHECK(flows.state_flow[s] == doctest::Approx(through[s]).epsilon(1e-12));
    const auto kids = env.children(static_cast<StateId>(s));
    for (std::size_t k = 0; k < kids.size(); ++k) {
      const double expect = edge[{static_cast<StateId>(s), kids[k].state}];
      CHECK(flows.edge_flow[s][k] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("reference-flow delta over Z*") {
  RegularTree env(3, 2);
  Rng rng(3);
  const auto m = perturbed_balanced_model(env, rng, 0.3);
  const double c_max = std::sqrt(max_trajectory_tb_loss(m, env));
  CHECK(exact_delta_over_zstar(m, env, c_max + 1e-9) == 0.0);
  CHECK(exact_delta_over_zstar(m, env, 0.5 * c_max) > 0.0);
  CHECK(exact_delta_over_zstar(m, env, 0.25 * c_max) > exact_delta_over_zstar(m, env, 0.5 * c_max));
}

TEST_CASE("reward TV and the one-more-mode closed form") {
  const std::vector<double> a = {1.0, 1.0}, b = {1.0, 3.0};
  CHECK(reward_tv(a, b) == doctest::Approx(0.25));
  for (std::size_t g : {2u, 3u, 4u}) {
    for (std::size_t h : {1u, 2u, 3u}) {
      for (double eps : {1e-3, 0.1, 0.5, 1.0}) {
        const std::size_t leaves = static_cast<std::size_t>(std::pow(g, h));
        std::vector<double> prev(leaves, 1.0), next(leaves, 1.0);
        prev.back() = eps;
        CHECK(one_more_mode_tv_closed_form(g, h, eps) == doctest::Approx(reward_tv(prev, next)).epsilon(1e-12));
      }
    }
  }
  CHECK(one_more_mode_tv_closed_form(3, 2, 1.0) == 0.0);
}
