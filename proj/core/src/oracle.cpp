#include "sgfn/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "sgfn/losses.hpp"

namespace sgfn {

ExactFlows exact_flows(const DagEnv& env, std::size_t cap) {
  const auto order = topological_order(env, cap);
  ExactFlows f;
  f.state_flow.assign(env.num_states(), 0.0);
  f.edge_flow.resize(env.num_states());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const StateId s = *it;
    if (s == env.sink()) continue;
    const auto kids = env.children(s);
    f.edge_flow[s].assign(kids.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < kids.size(); ++i) {
      const StateId c = kids[i].state;
      const double share = c == env.sink() ? env.reward(s)
                                           : f.state_flow[c] / static_cast<double>(env.parents(c).size());
      f.edge_flow[s][i] = share;
      total += share;
    }
    f.state_flow[s] = total;
  }
  f.z_star = f.state_flow[env.initial_state()];
  f.state_flow[env.sink()] = f.z_star;
  return f;
}

TerminalDistribution target_distribution(const DagEnv& env, std::size_t cap) {
  const auto terms = enumerate_terminating(env, cap);
  TerminalDistribution d;
  double z = 0.0;
  for (const auto& t : terms) z += t.reward;
  for (const auto& t : terms) {
    d.states.push_back(t.state);
    d.probs.push_back(t.reward / z);
  }
  return d;
}

double exact_total_l1(const PolicyModel& model, const DagEnv& env, std::size_t cap) {
  const auto pt = exact_terminal_distribution(model, env, cap);
  const auto target = target_distribution(env, cap);
  if (pt.states != target.states) throw std::logic_error("exact_total_l1: terminal sets differ");
  double l1 = 0.0;
  for (std::size_t i = 0; i < pt.probs.size(); ++i) l1 += std::abs(pt.probs[i] - target.probs[i]);
  return l1;
}

double exact_tv(const PolicyModel& model, const DagEnv& env, std::size_t cap) {
  return 0.5 * exact_total_l1(model, env, cap);
}

double empirical_total_l1(std::span<const StateId> terminal_samples, const DagEnv& env, std::size_t cap) {
  if (terminal_samples.empty()) throw std::invalid_argument("empirical_total_l1: no samples");
  const auto target = target_distribution(env, cap);
  std::unordered_map<StateId, std::size_t> counts;
  for (StateId x : terminal_samples) ++counts[x];
  const double n = static_cast<double>(terminal_samples.size());
  double l1 = 0.0;
  std::size_t matched = 0;
  for (std::size_t i = 0; i < target.states.size(); ++i) {
    const auto it = counts.find(target.states[i]);
    const double freq = it == counts.end() ? 0.0 : static_cast<double>(it->second) / n;
    if (it != counts.end()) ++matched;
    l1 += std::abs(freq - target.probs[i]);
  }
  if (matched != counts.size()) throw std::invalid_argument("empirical_total_l1: sample is not a terminating state");
  return l1;
}

std::size_t count_modes(std::span<const StateId> terminal_samples, const DagEnv& env) {
  std::set<StateId> seen;
  for (StateId x : terminal_samples) {
    if (env.mode_region(x) >= 0) seen.insert(x);
  }
  return seen.size();
}

std::size_t count_mode_regions(std::span<const StateId> terminal_samples, const DagEnv& env) {
  std::set<std::int64_t> seen;
  for (StateId x : terminal_samples) {
    const auto r = env.mode_region(x);
    if (r >= 0) seen.insert(r);
  }
  return seen.size();
}

std::size_t total_mode_regions(const DagEnv& env, std::size_t cap) {
  std::set<std::int64_t> seen;
  for (const auto& t : enumerate_terminating(env, cap)) {
    const auto r = env.mode_region(t.state);
    if (r >= 0) seen.insert(r);
  }
  return seen.size();
}

// ----------------------------------------------------------------- models

PolicyModel balanced_tabular_model(const DagEnv& env, bool learned_backward, bool flow_head, std::size_t cap) {
  const ExactFlows f = exact_flows(env, cap);
  ModelSpec spec;
  spec.kind = "tabular";
  spec.learned_backward = learned_backward;
  spec.flow_head = flow_head;
  Rng unused(0);
  PolicyModel m = PolicyModel::create(env, spec, unused);
  auto fwd = m.params.slice("forward");
  const std::size_t width = env.forward_slots();
  for (std::size_t i = 0; i < env.num_states(); ++i) {
    const auto s = static_cast<StateId>(i);
    if (s == env.sink()) continue;
    const auto kids = env.children(s);
    for (std::size_t k = 0; k < kids.size(); ++k) fwd[i * width + kids[k].slot] = std::log(f.edge_flow[s][k]);
  }
  if (flow_head) {
    auto flow = m.params.slice("flow");
    for (std::size_t i = 0; i < env.num_states(); ++i) flow[i] = std::log(f.state_flow[i]);
  }
  m.set_log_z(std::log(f.z_star));
  return m;
}

PolicyModel random_tabular_model(const DagEnv& env, Rng& rng, double scale, bool learned_backward, bool flow_head) {
  ModelSpec spec;
  spec.kind = "tabular";
  spec.learned_backward = learned_backward;
  spec.flow_head = flow_head;
  PolicyModel m = PolicyModel::create(env, spec, rng);
  for (double& v : m.params.values()) v = scale * (2.0 * uniform01(rng) - 1.0);
  return m;
}

PolicyModel perturbed_balanced_model(const DagEnv& env, Rng& rng, double noise, bool learned_backward) {
  PolicyModel m = balanced_tabular_model(env, learned_backward, false);
  for (double& v : m.params.values()) v += noise * (2.0 * uniform01(rng) - 1.0);
  return m;
}

// ------------------------------------------------------------ trajectories

namespace {

template <typename Visit>
void walk_paths(const DagEnv& env, std::size_t cap, Visit&& visit) {
  std::vector<StateId> path{env.initial_state()};
  std::vector<std::vector<Edge>> kids{env.children(env.initial_state())};
  std::vector<std::size_t> next{0};
  std::size_t count = 0;
  while (!path.empty()) {
    if (next.back() == kids.back().size()) {
      path.pop_back();
      kids.pop_back();
      next.pop_back();
      continue;
    }
    const Edge e = kids.back()[next.back()++];
    path.push_back(e.state);
    if (e.state == env.sink()) {
      if (++count > cap) throw CapExceeded("trajectory enumeration exceeds cap");
      visit(path);
      path.pop_back();
      continue;
    }
    kids.push_back(env.children(e.state));
    next.push_back(0);
  }
}

std::size_t index_of(std::span<const Edge> edges, StateId s) {
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (edges[i].state == s) return i;
  }
  throw std::logic_error("index_of: missing edge");
}

}  // namespace

std::vector<std::vector<StateId>> enumerate_paths(const DagEnv& env, std::size_t cap) {
  std::vector<std::vector<StateId>> out;
  walk_paths(env, cap, [&](const std::vector<StateId>& p) { out.push_back(p); });
  return out;
}

std::vector<EnumeratedTrajectory> enumerate_trajectories(const PolicyModel& model, const DagEnv& env,
                                                         std::size_t cap) {
  const auto pf = forward_policy_table(model, env);
  const auto pb = backward_policy_table(model, env);
  const double log_zstar = std::log(true_partition_function(env));
  std::vector<EnumeratedTrajectory> out;
  walk_paths(env, cap, [&](const std::vector<StateId>& p) {
    EnumeratedTrajectory e;
    e.tau.states = p;
    const std::size_t n = p.size() - 2;
    for (std::size_t t = 0; t < n; ++t) {
      e.tau.log_pf += std::log(pf[p[t]][index_of(env.children(p[t]), p[t + 1])]);
      e.tau.log_pb += std::log(pb[p[t + 1]][index_of(env.parents(p[t + 1]), p[t])]);
    }
    e.tau.reward = env.reward(p[n]);
    e.log_target = std::log(e.tau.reward) - log_zstar + e.tau.log_pb;
    out.push_back(std::move(e));
  });
  return out;
}

double max_trajectory_tb_loss(const PolicyModel& model, const DagEnv& env, std::size_t cap) {
  double worst = 0.0;
  for (const auto& e : enumerate_trajectories(model, env, cap)) worst = std::max(worst, tb_loss(e.tau, model.log_z()));
  return worst;
}

double exact_delta_over_zstar(const PolicyModel& model, const DagEnv& env, double c, std::size_t cap) {
  const double zstar = true_partition_function(env);
  double total = 0.0;
  for (const auto& e : enumerate_trajectories(model, env, cap)) {
    const double lm = model.log_z() + e.tau.log_pf;
    const double lt = std::log(e.tau.reward) + e.tau.log_pb;
    total += reference_flow_delta(lm, lt, c);
  }
  return total / zstar;
}

double one_more_mode_tv_closed_form(std::size_t branching, std::size_t depth, double epsilon) {
  const double leaves = std::pow(static_cast<double>(branching), static_cast<double>(depth));
  const double prev_z = leaves - 1.0 + epsilon;
  return 0.5 * (leaves - 1.0) * (1.0 / prev_z - 1.0 / leaves) + 0.5 * (1.0 / leaves - epsilon / prev_z);
}

double reward_tv(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("reward_tv: size mismatch");
  double za = 0.0, zb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    za += a[i];
    zb += b[i];
  }
  double l1 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) l1 += std::abs(a[i] / za - b[i] / zb);
  return 0.5 * l1;
}

}  // namespace sgfn
