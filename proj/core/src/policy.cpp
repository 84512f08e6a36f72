#include "sgfn/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace sgfn {

// ------------------------------------------------------------------------ rng

std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view label, std::uint64_t index) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = global_seed ^ (h + 0x9e3779b97f4a7c15ULL * (index + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t sample_categorical(std::span<const double> weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw std::invalid_argument("sample_categorical: weights must have positive sum");
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return i;
  }
  return weights.size() - 1;
}

// ----------------------------------------------------------------- provenance

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::forward: return "forward";
    case Provenance::backward: return "backward";
    case Provenance::replayed: return "replayed";
  }
  return "forward";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "forward") return Provenance::forward;
  if (s == "backward") return Provenance::backward;
  if (s == "replayed") return Provenance::replayed;
  throw std::invalid_argument("unknown provenance: " + s);
}

// ---------------------------------------------------------------- PolicyModel

PolicyModel PolicyModel::create(const DagEnv& env, const ModelSpec& spec, Rng& rng) {
  PolicyModel m;
  m.spec = spec;
  auto make = [&](std::size_t width) -> std::shared_ptr<const Approximator> {
    if (spec.kind == "tabular") return std::make_shared<TabularApproximator>(env.num_states(), width);
    if (spec.kind == "mlp") return std::make_shared<MlpApproximator>(env.feature_width(), spec.hidden, width);
    throw std::invalid_argument("unknown model kind: " + spec.kind);
  };
  m.forward_head = make(env.forward_slots());
  m.params.add_slice("forward", m.forward_head->num_params());
  if (spec.learned_backward) {
    m.backward_head = make(env.backward_slots());
    m.params.add_slice("backward", m.backward_head->num_params());
  }
  if (spec.flow_head) {
    m.flow_head = make(1);
    m.params.add_slice("flow", m.flow_head->num_params());
  }
  m.params.add_slice("log_z", 1);
  m.forward_head->initialize(m.params.slice("forward"), rng);
  if (m.backward_head) m.backward_head->initialize(m.params.slice("backward"), rng);
  if (m.flow_head) m.flow_head->initialize(m.params.slice("flow"), rng);
  m.set_log_z(spec.log_z_init);
  return m;
}

// ------------------------------------------------------------------ HeadBatch

void HeadBatch::request(StateId s) {
  if (index_.emplace(s, static_cast<Eigen::Index>(states_.size())).second) states_.push_back(s);
}

void HeadBatch::evaluate(const Approximator& head, std::span<const double> params, const DagEnv& env) {
  if (states_.empty()) return;
  out_ = head.evaluate(params, env, states_);
  grad_ = Eigen::MatrixXd::Zero(out_.rows(), out_.cols());
}

void HeadBatch::backprop(const Approximator& head, std::span<const double> params, const DagEnv& env,
                         std::span<double> grad) const {
  if (states_.empty()) return;
  head.accumulate_gradient(params, env, states_, grad_, grad);
}

double masked_log_softmax(const Eigen::Ref<const Eigen::VectorXd>& logits, std::span<const Edge> edges,
                          std::size_t chosen, std::span<double> probs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (const Edge& e : edges) mx = std::max(mx, logits(e.slot));
  double sum = 0.0;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const double w = std::exp(logits(edges[i].slot) - mx);
    if (!probs.empty()) probs[i] = w;
    sum += w;
  }
  if (!probs.empty()) {
    for (std::size_t i = 0; i < edges.size(); ++i) probs[i] /= sum;
  }
  return logits(edges[chosen].slot) - mx - std::log(sum);
}

namespace {

std::size_t find_edge(std::span<const Edge> edges, StateId target) {
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (edges[i].state == target) return i;
  }
  throw std::invalid_argument("trajectory contains an invalid edge");
}

}  // namespace

std::pair<double, double> trajectory_log_probs(const PolicyModel& model, const DagEnv& env,
                                               std::span<const StateId> states) {
  if (states.size() < 3 || states.front() != env.initial_state() || states.back() != env.sink())
    throw std::invalid_argument("trajectory must run from s0 to sf through a terminating state");
  const std::size_t n = states.size() - 2;  // index of x
  if (!env.is_terminating(states[n])) throw std::invalid_argument("trajectory does not end in a terminating state");

  HeadBatch fwd;
  HeadBatch bwd;
  std::vector<std::vector<Edge>> kids(n), pars(n);
  for (std::size_t t = 0; t < n; ++t) {
    kids[t] = env.children(states[t]);
    pars[t] = env.parents(states[t + 1]);
    if (kids[t].size() > 1) fwd.request(states[t]);
    if (model.backward_head && pars[t].size() > 1) bwd.request(states[t + 1]);
  }
  fwd.evaluate(*model.forward_head, model.params.slice("forward"), env);
  if (model.backward_head) bwd.evaluate(*model.backward_head, model.params.slice("backward"), env);

  double log_pf = 0.0;
  double log_pb = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t ci = find_edge(kids[t], states[t + 1]);
    if (kids[t].size() > 1) log_pf += masked_log_softmax(fwd.output(states[t]), kids[t], ci, {});
    const std::size_t pi = find_edge(pars[t], states[t]);
    if (pars[t].size() > 1) {
      if (model.backward_head) {
        log_pb += masked_log_softmax(bwd.output(states[t + 1]), pars[t], pi, {});
      } else {
        log_pb -= std::log(static_cast<double>(pars[t].size()));
      }
    }
  }
  return {log_pf, log_pb};
}

// ------------------------------------------------------------------- sampling

std::vector<Trajectory> sample_forward_batch(const PolicyModel& model, const DagEnv& env, Rng& rng,
                                             std::size_t count, double epsilon, bool cache_log_probs) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0))
    throw std::invalid_argument("sample_forward: epsilon must be in [0, 1]");
  std::vector<Trajectory> out(count);
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < count; ++i) {
    out[i].states.push_back(env.initial_state());
    out[i].provenance = Provenance::forward;
    active.push_back(i);
  }
  const StateId sf = env.sink();
  std::vector<double> probs;
  while (!active.empty()) {
    HeadBatch batch;
    std::vector<std::vector<Edge>> kids(active.size());
    for (std::size_t a = 0; a < active.size(); ++a) {
      kids[a] = env.children(out[active[a]].states.back());
      if (kids[a].size() > 1) batch.request(out[active[a]].states.back());
    }
    batch.evaluate(*model.forward_head, model.params.slice("forward"), env);
    std::vector<std::size_t> still;
    for (std::size_t a = 0; a < active.size(); ++a) {
      auto& traj = out[active[a]];
      const auto& k = kids[a];
      std::size_t pick = 0;
      if (k.size() > 1) {
        if (epsilon > 0.0 && uniform01(rng) < epsilon) {
          pick = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(k.size()));
          pick = std::min(pick, k.size() - 1);
        } else {
          probs.assign(k.size(), 0.0);
          masked_log_softmax(batch.output(traj.states.back()), k, 0, probs);
          pick = sample_categorical(probs, rng);
        }
      }
      traj.states.push_back(k[pick].state);
      if (k[pick].state != sf) still.push_back(active[a]);
    }
    active = std::move(still);
  }
  for (auto& t : out) {
    t.reward = env.reward(t.terminal());
    if (cache_log_probs) std::tie(t.log_pf, t.log_pb) = trajectory_log_probs(model, env, t.states);
  }
  return out;
}

Trajectory sample_forward(const PolicyModel& model, const DagEnv& env, Rng& rng, double epsilon) {
  return std::move(sample_forward_batch(model, env, rng, 1, epsilon).front());
}

std::vector<Trajectory> sample_backward_batch(const PolicyModel& model, const DagEnv& env,
                                              std::span<const StateId> xs, Rng& rng, bool cache_log_probs) {
  std::vector<Trajectory> out(xs.size());
  std::vector<std::size_t> active;
  const StateId s0 = env.initial_state();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!env.is_terminating(xs[i])) throw std::invalid_argument("sample_backward: state is not terminating");
    out[i].states = {env.sink(), xs[i]};
    out[i].provenance = Provenance::backward;
    if (xs[i] != s0) active.push_back(i);
  }
  std::vector<double> probs;
  while (!active.empty()) {
    HeadBatch batch;
    std::vector<std::vector<Edge>> pars(active.size());
    for (std::size_t a = 0; a < active.size(); ++a) {
      pars[a] = env.parents(out[active[a]].states.back());
      if (model.backward_head && pars[a].size() > 1) batch.request(out[active[a]].states.back());
    }
    if (model.backward_head) batch.evaluate(*model.backward_head, model.params.slice("backward"), env);
    std::vector<std::size_t> still;
    for (std::size_t a = 0; a < active.size(); ++a) {
      auto& traj = out[active[a]];
      const auto& p = pars[a];
      std::size_t pick = 0;
      if (p.size() > 1) {
        if (model.backward_head) {
          probs.assign(p.size(), 0.0);
          masked_log_softmax(batch.output(traj.states.back()), p, 0, probs);
          pick = sample_categorical(probs, rng);
        } else {
          pick = std::min(static_cast<std::size_t>(uniform01(rng) * static_cast<double>(p.size())), p.size() - 1);
        }
      }
      traj.states.push_back(p[pick].state);
      if (p[pick].state != s0) still.push_back(active[a]);
    }
    active = std::move(still);
  }
  for (auto& t : out) {
    std::reverse(t.states.begin(), t.states.end());
    t.reward = env.reward(t.terminal());
    if (cache_log_probs) std::tie(t.log_pf, t.log_pb) = trajectory_log_probs(model, env, t.states);
  }
  return out;
}

Trajectory sample_backward(const PolicyModel& model, const DagEnv& env, StateId x, Rng& rng) {
  const StateId xs[] = {x};
  return std::move(sample_backward_batch(model, env, xs, rng).front());
}

// ------------------------------------------------------- exact distributions

namespace {

constexpr std::size_t kEvalChunk = 4096;

std::vector<std::vector<double>> policy_table(const PolicyModel& model, const DagEnv& env, std::size_t cap,
                                              bool forward) {
  const std::size_t n = env.num_states();
  if (n > cap) throw CapExceeded("policy table: state count exceeds cap");
  std::vector<std::vector<double>> table(n);
  const Approximator* head = forward ? model.forward_head.get() : model.backward_head.get();
  std::vector<StateId> pending;
  auto flush = [&] {
    if (pending.empty()) return;
    HeadBatch batch;
    for (StateId s : pending) batch.request(s);
    batch.evaluate(*head, model.params.slice(forward ? "forward" : "backward"), env);
    for (StateId s : pending) {
      const auto edges = forward ? env.children(s) : env.parents(s);
      table[s].assign(edges.size(), 0.0);
      masked_log_softmax(batch.output(s), edges, 0, table[s]);
    }
    pending.clear();
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = static_cast<StateId>(i);
    if (!forward && s == env.sink()) continue;
    const auto edges = forward ? env.children(s) : env.parents(s);
    if (edges.size() == 1) {
      table[s] = {1.0};
    } else if (edges.size() > 1) {
      if (head == nullptr) {
        table[s].assign(edges.size(), 1.0 / static_cast<double>(edges.size()));
      } else {
        pending.push_back(s);
        if (pending.size() == kEvalChunk) flush();
      }
    }
  }
  flush();
  return table;
}

}  // namespace

std::vector<std::vector<double>> forward_policy_table(const PolicyModel& model, const DagEnv& env, std::size_t cap) {
  return policy_table(model, env, cap, true);
}

std::vector<std::vector<double>> backward_policy_table(const PolicyModel& model, const DagEnv& env, std::size_t cap) {
  return policy_table(model, env, cap, false);
}

TerminalDistribution exact_terminal_distribution(const PolicyModel& model, const DagEnv& env, std::size_t cap) {
  const auto order = topological_order(env, cap);
  const auto table = forward_policy_table(model, env, cap);
  std::vector<double> mass(env.num_states(), 0.0);
  mass[env.initial_state()] = 1.0;
  TerminalDistribution dist;
  for (StateId s : order) {
    if (env.is_terminating(s)) {
      dist.states.push_back(s);
      continue;
    }
    if (s == env.sink()) continue;
    const auto kids = env.children(s);
    for (std::size_t i = 0; i < kids.size(); ++i) mass[kids[i].state] += mass[s] * table[s][i];
  }
  std::sort(dist.states.begin(), dist.states.end());
  dist.probs.reserve(dist.states.size());
  for (StateId x : dist.states) dist.probs.push_back(mass[x]);
  return dist;
}

}  // namespace sgfn
