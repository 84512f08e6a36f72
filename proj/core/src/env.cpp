#include "sgfn/env.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>
#include <unordered_set>

namespace sgfn {

std::int64_t DagEnv::mode_region(StateId) const { return -1; }

std::size_t DagEnv::reachable_terminals(StateId s) const {
  std::unordered_set<StateId> seen{s};
  std::vector<StateId> stack{s};
  std::size_t count = 0;
  while (!stack.empty()) {
    const StateId u = stack.back();
    stack.pop_back();
    if (is_terminating(u)) ++count;
    for (const Edge& e : children(u)) {
      if (seen.insert(e.state).second) stack.push_back(e.state);
    }
  }
  return count;
}

// ---------------------------------------------------------------- RegularTree

RegularTree::RegularTree(std::size_t branching, std::size_t depth)
    : RegularTree(branching, depth, {}) {}

RegularTree::RegularTree(std::size_t branching, std::size_t depth, std::vector<double> leaf_rewards)
    : branching_(branching), depth_(depth) {
  if (branching < 2) throw std::invalid_argument("RegularTree: branching must be >= 2");
  if (depth < 1) throw std::invalid_argument("RegularTree: depth must be >= 1");
  level_offset_.push_back(0);
  std::size_t width = 1;
  for (std::size_t level = 0; level <= depth; ++level) {
    level_offset_.push_back(level_offset_.back() + width);
    if (level_offset_.back() > kDefaultStateCap * 16) throw CapExceeded("RegularTree: too many nodes");
    width *= branching;
  }
  num_nodes_ = level_offset_.back();
  const std::size_t leaves = level_offset_[depth + 1] - level_offset_[depth];
  if (leaf_rewards.empty()) leaf_rewards.assign(leaves, 1.0);
  if (leaf_rewards.size() != leaves) throw std::invalid_argument("RegularTree: leaf_rewards size must be g^h");
  for (double r : leaf_rewards) {
    if (!(r > 0.0) || !std::isfinite(r)) throw std::invalid_argument("RegularTree: leaf rewards must be positive");
  }
  leaf_rewards_ = std::move(leaf_rewards);
  max_reward_ = *std::max_element(leaf_rewards_.begin(), leaf_rewards_.end());
}

StateId RegularTree::leaf(std::size_t index) const {
  if (index >= leaf_rewards_.size()) throw std::out_of_range("RegularTree::leaf");
  return static_cast<StateId>(level_offset_[depth_] + index);
}

std::size_t RegularTree::level_of(StateId s) const {
  auto it = std::upper_bound(level_offset_.begin(), level_offset_.end(), static_cast<std::size_t>(s));
  return static_cast<std::size_t>(it - level_offset_.begin()) - 1;
}

std::vector<Edge> RegularTree::children(StateId s) const {
  if (s >= num_nodes_) return {};
  const std::size_t level = level_of(s);
  if (level == depth_) return {Edge{sink(), 0}};
  const std::size_t pos = s - level_offset_[level];
  std::vector<Edge> out;
  out.reserve(branching_);
  for (std::size_t k = 0; k < branching_; ++k) {
    out.push_back(Edge{static_cast<StateId>(level_offset_[level + 1] + pos * branching_ + k),
                       static_cast<std::uint32_t>(k)});
  }
  return out;
}

std::vector<Edge> RegularTree::parents(StateId s) const {
  if (s == 0) return {};
  if (s == sink()) {
    std::vector<Edge> out;
    for (std::size_t i = 0; i < num_leaves(); ++i) out.push_back(Edge{leaf(i), 0});
    return out;
  }
  const std::size_t level = level_of(s);
  const std::size_t pos = s - level_offset_[level];
  return {Edge{static_cast<StateId>(level_offset_[level - 1] + pos / branching_), 0}};
}

bool RegularTree::is_terminating(StateId s) const { return s >= level_offset_[depth_] && s < num_nodes_; }

double RegularTree::reward(StateId s) const {
  return is_terminating(s) ? leaf_rewards_[s - level_offset_[depth_]] : 0.0;
}

void RegularTree::encode(StateId s, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  if (s < num_nodes_) out[s] = 1.0;
}

std::int64_t RegularTree::mode_region(StateId s) const {
  if (!is_terminating(s)) return -1;
  return reward(s) >= max_reward_ ? static_cast<std::int64_t>(s - level_offset_[depth_]) : -1;
}

std::size_t RegularTree::reachable_terminals(StateId s) const {
  if (s >= num_nodes_) return 0;
  std::size_t count = 1;
  for (std::size_t l = level_of(s); l < depth_; ++l) count *= branching_;
  return count;
}

std::string RegularTree::describe() const {
  std::ostringstream os;
  os << "tree(g=" << branching_ << ",h=" << depth_ << ")";
  return os.str();
}

// ------------------------------------------------------------------ Hypergrid

double hypergrid_reward(std::span<const std::size_t> x, std::size_t side, double r0, double r1, double r2) {
  bool outer = true;
  bool corner = true;
  const double denom = static_cast<double>(side - 1);
  for (std::size_t xi : x) {
    const double d = std::abs(static_cast<double>(xi) / denom - 0.5);
    outer = outer && d > 0.25;
    corner = corner && d > 0.4;
  }
  return r0 + (outer ? r1 : 0.0) + (corner ? r2 : 0.0);
}

double hypergrid_default_r0(std::size_t side) {
  if (side <= 1) throw std::invalid_argument("hypergrid_default_r0: side must be > 1");
  return std::pow(10.0, -2.0 * std::log2(static_cast<double>(side) / 8.0) - 1.0);
}

Hypergrid::Hypergrid(std::size_t dim, std::size_t side, double r0, double r1, double r2)
    : dim_(dim), side_(side), r0_(r0), r1_(r1), r2_(r2) {
  if (dim < 1) throw std::invalid_argument("Hypergrid: dim must be >= 1");
  if (side < 2) throw std::invalid_argument("Hypergrid: side must be >= 2");
  if (!(r0 > 0.0) || r1 < 0.0 || r2 < 0.0) throw std::invalid_argument("Hypergrid: need r0 > 0, r1 >= 0, r2 >= 0");
  grid_points_ = 1;
  for (std::size_t i = 0; i < dim; ++i) {
    stride_.push_back(grid_points_);
    grid_points_ *= side;
    if (grid_points_ > (std::size_t{1} << 31)) throw CapExceeded("Hypergrid: state space too large for 32-bit ids");
  }
}

StateId Hypergrid::grid_state(std::span<const std::size_t> coords) const {
  if (coords.size() != dim_) throw std::invalid_argument("Hypergrid::grid_state: wrong dimension");
  std::size_t id = 0;
  for (std::size_t i = 0; i < dim_; ++i) {
    if (coords[i] >= side_) throw std::out_of_range("Hypergrid::grid_state: coordinate out of range");
    id += coords[i] * stride_[i];
  }
  return static_cast<StateId>(id);
}

StateId Hypergrid::terminal_of(std::span<const std::size_t> coords) const {
  return static_cast<StateId>(grid_points_ + grid_state(coords));
}

std::vector<std::size_t> Hypergrid::coords_of(StateId s) const {
  std::size_t g = s >= grid_points_ ? s - grid_points_ : s;
  std::vector<std::size_t> c(dim_);
  for (std::size_t i = 0; i < dim_; ++i) {
    c[i] = g % side_;
    g /= side_;
  }
  return c;
}

std::vector<Edge> Hypergrid::children(StateId s) const {
  if (s == sink()) return {};
  if (s >= grid_points_) return {Edge{sink(), 0}};
  std::vector<Edge> out;
  std::size_t g = s;
  for (std::size_t i = 0; i < dim_; ++i) {
    if (g % side_ + 1 < side_) out.push_back(Edge{static_cast<StateId>(s + stride_[i]), static_cast<std::uint32_t>(i)});
    g /= side_;
  }
  out.push_back(Edge{static_cast<StateId>(s + grid_points_), static_cast<std::uint32_t>(dim_)});
  return out;
}

std::vector<Edge> Hypergrid::parents(StateId s) const {
  if (s == sink()) {
    std::vector<Edge> out;
    out.reserve(grid_points_);
    for (std::size_t g = 0; g < grid_points_; ++g) out.push_back(Edge{static_cast<StateId>(grid_points_ + g), 0});
    return out;
  }
  if (s >= grid_points_) return {Edge{static_cast<StateId>(s - grid_points_), static_cast<std::uint32_t>(dim_)}};
  std::vector<Edge> out;
  std::size_t g = s;
  for (std::size_t i = 0; i < dim_; ++i) {
    if (g % side_ > 0) out.push_back(Edge{static_cast<StateId>(s - stride_[i]), static_cast<std::uint32_t>(i)});
    g /= side_;
  }
  return out;
}

bool Hypergrid::is_terminating(StateId s) const { return s >= grid_points_ && s < 2 * grid_points_; }

double Hypergrid::reward(StateId s) const {
  if (!is_terminating(s)) return 0.0;
  const auto c = coords_of(s);
  return hypergrid_reward(c, side_, r0_, r1_, r2_);
}

void Hypergrid::encode(StateId s, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  if (s == sink()) return;
  std::size_t g = s >= grid_points_ ? s - grid_points_ : s;
  for (std::size_t i = 0; i < dim_; ++i) {
    out[i * side_ + g % side_] = 1.0;
    g /= side_;
  }
  if (s >= grid_points_) out[dim_ * side_] = 1.0;
}

std::int64_t Hypergrid::mode_region(StateId s) const {
  if (!is_terminating(s)) return -1;
  const auto c = coords_of(s);
  const double denom = static_cast<double>(side_ - 1);
  std::int64_t region = 0;
  for (std::size_t i = 0; i < dim_; ++i) {
    const double u = static_cast<double>(c[i]) / denom;
    if (!(std::abs(u - 0.5) > 0.4)) return -1;
    if (u > 0.5) region |= std::int64_t{1} << i;
  }
  return region;
}

std::size_t Hypergrid::reachable_terminals(StateId s) const {
  if (s == sink()) return 0;
  if (s >= grid_points_) return 1;
  std::size_t count = 1;
  for (std::size_t c : coords_of(s)) count *= side_ - c;
  return count;
}

std::string Hypergrid::describe() const {
  std::ostringstream os;
  os << "hypergrid(D=" << dim_ << ",H=" << side_ << ")";
  return os.str();
}

// ---------------------------------------------------------------- OneMoreMode

OneMoreMode::OneMoreMode(std::shared_ptr<const DagEnv> base, std::vector<std::pair<StateId, double>> added)
    : base_(std::move(base)), added_(std::move(added)) {
  if (!base_) throw std::invalid_argument("OneMoreMode: null base environment");
  std::sort(added_.begin(), added_.end());
  for (std::size_t i = 0; i < added_.size(); ++i) {
    const auto& [s, r] = added_[i];
    if (!base_->is_terminating(s)) throw std::invalid_argument("OneMoreMode: added reward on a non-terminating state");
    if (!(r >= 0.0) || !std::isfinite(r)) throw std::invalid_argument("OneMoreMode: added reward must be >= 0");
    if (i > 0 && added_[i - 1].first == s) throw std::invalid_argument("OneMoreMode: duplicate state in added rewards");
  }
}

double OneMoreMode::added_reward(StateId s) const {
  auto it = std::lower_bound(added_.begin(), added_.end(), std::pair<StateId, double>{s, -1.0});
  return it != added_.end() && it->first == s ? it->second : 0.0;
}

double OneMoreMode::reward(StateId s) const { return base_->reward(s) + added_reward(s); }

std::string OneMoreMode::describe() const {
  std::ostringstream os;
  os << "one_more_mode(" << base_->describe() << ",+" << added_.size() << ")";
  return os.str();
}

// -------------------------------------------------------------- enumeration

std::vector<TerminalReward> enumerate_terminating(const DagEnv& env, std::size_t cap) {
  if (env.num_states() > cap) throw CapExceeded("enumerate_terminating: state count exceeds cap");
  std::vector<TerminalReward> out;
  out.reserve(env.num_terminating());
  for (std::size_t s = 0; s < env.num_states(); ++s) {
    const auto id = static_cast<StateId>(s);
    if (env.is_terminating(id)) out.push_back({id, env.reward(id)});
  }
  return out;
}

double true_partition_function(const DagEnv& env, std::size_t cap) {
  double z = 0.0;
  for (const auto& t : enumerate_terminating(env, cap)) z += t.reward;
  return z;
}

std::vector<StateId> topological_order(const DagEnv& env, std::size_t cap) {
  const std::size_t n = env.num_states();
  if (n > cap) throw CapExceeded("topological_order: state count exceeds cap");
  std::vector<std::size_t> indegree(n, 0);
  for (std::size_t s = 0; s < n; ++s) indegree[s] = env.parents(static_cast<StateId>(s)).size();
  std::deque<StateId> ready;
  for (std::size_t s = 0; s < n; ++s) {
    if (indegree[s] == 0) ready.push_back(static_cast<StateId>(s));
  }
  std::vector<StateId> order;
  order.reserve(n);
  while (!ready.empty()) {
    const StateId s = ready.front();
    ready.pop_front();
    order.push_back(s);
    for (const Edge& e : env.children(s)) {
      if (--indegree[e.state] == 0) ready.push_back(e.state);
    }
  }
  if (order.size() != n) throw std::runtime_error("topological_order: graph has a cycle");
  return order;
}

std::string validate_env(const DagEnv& env, std::size_t cap) {
  const std::size_t n = env.num_states();
  if (n > cap) return "state count exceeds cap";
  const StateId s0 = env.initial_state();
  const StateId sf = env.sink();
  if (!env.parents(s0).empty()) return "s0 has parents";
  if (!env.children(sf).empty()) return "sf has children";
  std::vector<StateId> order;
  try {
    order = topological_order(env, cap);
  } catch (const std::exception& e) {
    return e.what();
  }
  if (order.front() != s0) return "s0 is not the unique source";
  if (order.back() != sf) return "sf is not the unique sink";
  std::size_t terminating = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = static_cast<StateId>(i);
    const auto kids = env.children(s);
    if (s != sf && kids.empty()) return "state " + std::to_string(s) + " has no children";
    if (s != s0 && env.parents(s).empty()) return "state " + std::to_string(s) + " has no parents";
    for (const Edge& c : kids) {
      if (c.slot >= env.forward_slots()) return "forward slot out of range";
      const auto back = env.parents(c.state);
      if (std::none_of(back.begin(), back.end(), [&](const Edge& p) { return p.state == s; }))
        return "edge " + std::to_string(s) + "->" + std::to_string(c.state) + " missing from parents";
    }
    for (const Edge& p : env.parents(s)) {
      if (s != sf && p.slot >= env.backward_slots()) return "backward slot out of range";
      const auto fwd = env.children(p.state);
      if (std::none_of(fwd.begin(), fwd.end(), [&](const Edge& c) { return c.state == s; }))
        return "edge " + std::to_string(p.state) + "->" + std::to_string(s) + " missing from children";
    }
    const bool only_sink = kids.size() == 1 && kids[0].state == sf;
    if (env.is_terminating(s) != only_sink) return "terminating flag inconsistent at " + std::to_string(s);
    if (env.is_terminating(s)) {
      ++terminating;
      if (!(env.reward(s) > 0.0)) return "non-positive reward at terminating state " + std::to_string(s);
    } else if (env.reward(s) != 0.0) {
      return "non-zero reward at non-terminating state " + std::to_string(s);
    }
  }
  if (terminating != env.num_terminating()) return "num_terminating mismatch";
  return {};
}

OneMoreModePair one_more_mode_tree(std::size_t branching, std::size_t depth, double epsilon) {
  if (!(epsilon > 0.0) || epsilon > 1.0) throw std::invalid_argument("one_more_mode_tree: epsilon must be in (0, 1]");
  RegularTree probe(branching, depth);
  std::vector<double> rewards(probe.num_leaves(), 1.0);
  rewards.back() = epsilon;
  auto prev = std::make_shared<const RegularTree>(branching, depth, rewards);
  const StateId promoted = prev->leaf(prev->num_leaves() - 1);
  auto next = std::make_shared<const OneMoreMode>(prev, std::vector<std::pair<StateId, double>>{{promoted, 1.0 - epsilon}});
  return {prev, next, promoted};
}

}  // namespace sgfn
