#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "sgfn/env.hpp"

using namespace sgfn;

namespace {

// Independent count of distinct terminating states reachable from s.
std::size_t brute_reachable(const DagEnv& env, StateId s) {
  std::set<StateId> seen, terms;
  std::vector<StateId> stack{s};
  while (!stack.empty()) {
    const StateId u = stack.back();
    stack.pop_back();
    if (!seen.insert(u).second) continue;
    if (env.is_terminating(u)) terms.insert(u);
    for (const Edge& e : env.children(u)) stack.push_back(e.state);
  }
  return terms.size();
}

void check_structure(const DagEnv& env) {
  CHECK(validate_env(env).empty());
  const auto order = topological_order(env);
  REQUIRE(order.size() == env.num_states());
  CHECK(order.front() == env.initial_state());
  CHECK(order.back() == env.sink());
  std::vector<std::size_t> pos(env.num_states());
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
  for (std::size_t s = 0; s < env.num_states(); ++s) {
    const auto id = static_cast<StateId>(s);
    for (const Edge& c : env.children(id)) {
      CHECK(pos[c.state] > pos[id]);
      const auto ps = env.parents(c.state);
      CHECK(std::any_of(ps.begin(), ps.end(), [&](const Edge& p) { return p.state == id; }));
    }
    for (const Edge& p : env.parents(id)) {
      const auto cs = env.children(p.state);
      CHECK(std::any_of(cs.begin(), cs.end(), [&](const Edge& c) { return c.state == id; }));
    }
    if (env.is_terminating(id)) {
      CHECK(env.reward(id) > 0.0);
      const auto cs = env.children(id);
      REQUIRE(cs.size() == 1);
      CHECK(cs[0].state == env.sink());
    } else {
      CHECK(env.reward(id) == 0.0);
    }
  }
  CHECK(env.parents(env.initial_state()).empty());
  CHECK(env.children(env.sink()).empty());
}

}  // namespace

TEST_CASE("regular tree layout is breadth-first with the sink last") {
  RegularTree t(3, 2);
  CHECK(t.num_states() == 1 + 3 + 9 + 1);
  CHECK(t.sink() == 13);
  CHECK(t.num_leaves() == 9);
  CHECK(t.leaf(0) == 4);
  CHECK(t.leaf(8) == 12);
  const auto kids = t.children(0);
  REQUIRE(kids.size() == 3);
  for (std::uint32_t k = 0; k < 3; ++k) {
    CHECK(kids[k].state == 1 + k);
    CHECK(kids[k].slot == k);
  }
  CHECK(t.max_trajectory_length() == 3);
  check_structure(t);
}

TEST_CASE("regular tree: every non-root state has exactly one parent") {
  RegularTree t(2, 3);
  for (std::size_t s = 1; s < t.num_states() - 1; ++s) CHECK(t.parents(static_cast<StateId>(s)).size() == 1);
  // The sink's parents are the leaves.
  CHECK(t.parents(t.sink()).size() == 8);
}

TEST_CASE("regular tree leaf rewards") {
  RegularTree t(2, 1, {1.0, 2.0});
  CHECK(t.reward(t.leaf(0)) == 1.0);
  CHECK(t.reward(t.leaf(1)) == 2.0);
  CHECK(t.reward(0) == 0.0);
  CHECK_THROWS(RegularTree(2, 1, {1.0}));
  CHECK_THROWS(RegularTree(2, 1, {1.0, 0.0}));
  CHECK_THROWS(RegularTree(0, 1));
}

TEST_CASE("enumerate_terminating and partition function") {
  RegularTree t(3, 2);
  const auto terms = enumerate_terminating(t);
  CHECK(terms.size() == 9);
  CHECK(true_partition_function(t) == doctest::Approx(9.0));

  Hypergrid g(2, 4, 0.1, 0.5, 2.0);
  CHECK(enumerate_terminating(g).size() == 16);
  CHECK(g.num_terminating() == 16);

  const double eps = 0.1;
  auto base = std::make_shared<RegularTree>(3, 2);
  OneMoreMode omm(base, {{4, 1.0 - eps}});
  CHECK(true_partition_function(omm) == doctest::Approx(9.0 + (1.0 - eps)));
  CHECK(omm.reward(4) == doctest::Approx(2.0 - eps));
  CHECK(omm.reward(5) == 1.0);
  check_structure(omm);
}

TEST_CASE("hypergrid reward formula") {
  const std::size_t center[] = {3, 3};
  CHECK(hypergrid_reward(center, 8, 0.1, 0.5, 2.0) == doctest::Approx(0.1));
  const std::size_t corner[] = {0, 0};
  CHECK(hypergrid_reward(corner, 8, 0.1, 0.5, 2.0) == doctest::Approx(2.6));
  const std::size_t one_d[] = {6};
  CHECK(hypergrid_reward(one_d, 8, 0.1, 0.5, 2.0) == doctest::Approx(0.6));
  // Mixed: one coordinate in the outer band, the other central.
  const std::size_t mixed[] = {0, 3};
  CHECK(hypergrid_reward(mixed, 8, 0.1, 0.5, 2.0) == doctest::Approx(0.1));
}

TEST_CASE("hypergrid default r0") {
  CHECK(hypergrid_default_r0(8) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(hypergrid_default_r0(16) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(hypergrid_default_r0(32) == doctest::Approx(1e-5).epsilon(1e-12));
}

TEST_CASE("hypergrid ids, actions and copies") {
  Hypergrid g(2, 3, 0.1, 0.5, 2.0);
  CHECK(g.num_states() == 19);
  CHECK(g.sink() == 18);
  const std::size_t xy[] = {1, 2};
  const StateId s = g.grid_state(xy);
  CHECK(s == 1 + 2 * 3);
  CHECK(g.terminal_of(xy) == 9 + s);
  CHECK(g.coords_of(s) == std::vector<std::size_t>{1, 2});
  CHECK(g.coords_of(g.terminal_of(xy)) == std::vector<std::size_t>{1, 2});
  for (std::size_t id = 0; id < g.num_grid_points(); ++id) {
    const auto c = g.coords_of(static_cast<StateId>(id));
    std::size_t below = 0;
    for (std::size_t v : c) below += v + 1 < g.side() ? 1 : 0;
    const auto kids = g.children(static_cast<StateId>(id));
    CHECK(kids.size() == below + 1);
    CHECK(kids.back().slot == g.dim());
    CHECK(g.is_terminating(kids.back().state));
    CHECK_FALSE(g.is_terminating(static_cast<StateId>(id)));
  }
  check_structure(g);
  check_structure(Hypergrid(3, 3, 0.1, 0.5, 2.0));
  check_structure(Hypergrid(1, 5, 0.1, 0.5, 2.0));
}

TEST_CASE("hypergrid encoding is one-hot per coordinate plus a terminal flag") {
  Hypergrid g(2, 4, 0.1, 0.5, 2.0);
  std::vector<double> f(g.feature_width());
  const std::size_t xy[] = {2, 1};
  g.encode(g.grid_state(xy), f);
  CHECK(f[2] == 1.0);
  CHECK(f[4 + 1] == 1.0);
  CHECK(f[8] == 0.0);
  CHECK(std::accumulate(f.begin(), f.end(), 0.0) == 2.0);
  g.encode(g.terminal_of(xy), f);
  CHECK(f[8] == 1.0);
}

TEST_CASE("reachable_terminals matches a brute-force walk") {
  RegularTree t(3, 3);
  Hypergrid g(2, 4, 0.1, 0.5, 2.0);
  auto omm = OneMoreMode(std::make_shared<Hypergrid>(2, 3, 0.1, 0.5, 2.0), {{12, 1.0}});
  for (const DagEnv* env : std::initializer_list<const DagEnv*>{&t, &g, &omm}) {
    for (std::size_t s = 0; s + 1 < env->num_states(); ++s) {
      CHECK(env->reachable_terminals(static_cast<StateId>(s)) == brute_reachable(*env, static_cast<StateId>(s)));
    }
  }
}

TEST_CASE("hypergrid mode regions are the 2^D corners") {
  Hypergrid g(2, 8, 0.1, 0.5, 2.0);
  std::set<std::int64_t> regions;
  std::size_t mode_cells = 0;
  for (const auto& t : enumerate_terminating(g)) {
    const auto r = g.mode_region(t.state);
    if (r >= 0) {
      regions.insert(r);
      ++mode_cells;
      CHECK(t.reward == doctest::Approx(2.6));
    }
  }
  CHECK(regions.size() == 4);
  CHECK(mode_cells == 4);  // |x/7 - 0.5| > 0.4 only at 0 and 7
}

TEST_CASE("one_more_mode_tree construction") {
  {
    const auto p = one_more_mode_tree(3, 2, 0.1);
    CHECK(true_partition_function(*p.previous) == doctest::Approx(8.1));
    CHECK(true_partition_function(*p.promoted) == doctest::Approx(9.0));
    CHECK(p.previous->reward(p.promoted_leaf) == doctest::Approx(0.1));
    CHECK(p.promoted->reward(p.promoted_leaf) == doctest::Approx(1.0));
  }
  {
    const auto p = one_more_mode_tree(2, 1, 0.5);
    const auto prev = enumerate_terminating(*p.previous);
    const auto prom = enumerate_terminating(*p.promoted);
    REQUIRE(prev.size() == 2);
    CHECK(prev[0].reward == 1.0);
    CHECK(prev[1].reward == 0.5);
    CHECK(prom[0].reward == 1.0);
    CHECK(prom[1].reward == 1.0);
  }
  {
    const auto p = one_more_mode_tree(3, 2, 1.0);
    for (const auto& t : enumerate_terminating(*p.previous)) CHECK(p.promoted->reward(t.state) == t.reward);
  }
}

TEST_CASE("caps are enforced") {
  RegularTree t(3, 3);
  CHECK_THROWS_AS(enumerate_terminating(t, 5), CapExceeded);
}
