#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sgfn {

/// Dense index into an environment's state table. Index 0 is always s0.
using StateId = std::uint32_t;

/// Outgoing (or incoming) edge together with the policy-head output slot it maps to.
struct Edge {
  StateId state;
  std::uint32_t slot;
};

/// Thrown when an operation would need to enumerate more states or
/// trajectories than the configured cap allows.
class CapExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kDefaultStateCap = 2'000'000;

/// Finite DAG with a unique source s0 (id 0) and a unique sink sf.
///
/// Terminating states are exactly the states whose only child is sf; they carry
/// a strictly positive reward. Implementations are immutable after construction.
class DagEnv {
 public:
  virtual ~DagEnv() = default;

  virtual std::size_t num_states() const = 0;
  StateId initial_state() const { return 0; }
  virtual StateId sink() const = 0;

  /// Children in slot order. Empty only for the sink.
  virtual std::vector<Edge> children(StateId s) const = 0;
  /// Parents in slot order. Empty only for s0.
  virtual std::vector<Edge> parents(StateId s) const = 0;

  virtual bool is_terminating(StateId s) const = 0;
  /// Positive on terminating states, zero elsewhere.
  virtual double reward(StateId s) const = 0;

  /// Width of the forward (children) and backward (parents) policy heads.
  virtual std::size_t forward_slots() const = 0;
  virtual std::size_t backward_slots() const = 0;

  virtual std::size_t feature_width() const = 0;
  virtual void encode(StateId s, std::span<double> out) const = 0;

  /// Number of terminating states, without enumerating them.
  virtual std::size_t num_terminating() const = 0;

  /// Longest s0 -> sf path, counted in edges.
  virtual std::size_t max_trajectory_length() const = 0;

  /// Identifier of the mode region a terminating state belongs to, or -1.
  virtual std::int64_t mode_region(StateId s) const;

  /// Number of distinct terminating states reachable from s (s included).
  /// The default walks the sub-DAG below s.
  virtual std::size_t reachable_terminals(StateId s) const;

  virtual std::string describe() const = 0;
};

/// g-ary tree of depth h; every leaf is terminating and leads to the sink.
/// States are numbered breadth-first, the sink comes last.
class RegularTree final : public DagEnv {
 public:
  RegularTree(std::size_t branching, std::size_t depth);
  RegularTree(std::size_t branching, std::size_t depth, std::vector<double> leaf_rewards);

  std::size_t branching() const { return branching_; }
  std::size_t depth() const { return depth_; }
  std::size_t num_leaves() const { return leaf_rewards_.size(); }
  StateId leaf(std::size_t index) const;
  std::span<const double> leaf_rewards() const { return leaf_rewards_; }

  std::size_t num_states() const override { return num_nodes_ + 1; }
  StateId sink() const override { return static_cast<StateId>(num_nodes_); }
  std::vector<Edge> children(StateId s) const override;
  std::vector<Edge> parents(StateId s) const override;
  bool is_terminating(StateId s) const override;
  double reward(StateId s) const override;
  std::size_t forward_slots() const override { return branching_; }
  std::size_t backward_slots() const override { return 1; }
  std::size_t feature_width() const override { return num_nodes_; }
  void encode(StateId s, std::span<double> out) const override;
  std::size_t num_terminating() const override { return leaf_rewards_.size(); }
  std::size_t max_trajectory_length() const override { return depth_ + 1; }
  std::int64_t mode_region(StateId s) const override;
  std::size_t reachable_terminals(StateId s) const override;
  std::string describe() const override;

 private:
  std::size_t level_of(StateId s) const;

  std::size_t branching_;
  std::size_t depth_;
  std::vector<std::size_t> level_offset_;  // first id of each level, plus one past the end
  std::size_t num_nodes_;
  std::vector<double> leaf_rewards_;
  double max_reward_;
};

/// Points of {0..H-1}^D. Each grid point may increment one coordinate or exit
/// into its own terminating copy, which then leads to the sink.
///
/// Ids: grid points 0..H^D-1 (coordinate 0 least significant), terminating
/// copies H^D..2H^D-1, sink 2H^D. Forward slot i < D increments coordinate i,
/// slot D is exit. Backward slot i < D undoes an increment of coordinate i,
/// slot D is the copy's grid point.
class Hypergrid final : public DagEnv {
 public:
  Hypergrid(std::size_t dim, std::size_t side, double r0, double r1, double r2);

  std::size_t dim() const { return dim_; }
  std::size_t side() const { return side_; }
  double r0() const { return r0_; }
  double r1() const { return r1_; }
  double r2() const { return r2_; }

  std::size_t num_grid_points() const { return grid_points_; }
  StateId grid_state(std::span<const std::size_t> coords) const;
  StateId terminal_of(std::span<const std::size_t> coords) const;
  std::vector<std::size_t> coords_of(StateId s) const;

  std::size_t num_states() const override { return 2 * grid_points_ + 1; }
  StateId sink() const override { return static_cast<StateId>(2 * grid_points_); }
  std::vector<Edge> children(StateId s) const override;
  std::vector<Edge> parents(StateId s) const override;
  bool is_terminating(StateId s) const override;
  double reward(StateId s) const override;
  std::size_t forward_slots() const override { return dim_ + 1; }
  std::size_t backward_slots() const override { return dim_ + 1; }
  std::size_t feature_width() const override { return dim_ * side_ + 1; }
  void encode(StateId s, std::span<double> out) const override;
  std::size_t num_terminating() const override { return grid_points_; }
  std::size_t max_trajectory_length() const override { return dim_ * (side_ - 1) + 2; }
  std::int64_t mode_region(StateId s) const override;
  std::size_t reachable_terminals(StateId s) const override;
  std::string describe() const override;

 private:
  std::size_t dim_;
  std::size_t side_;
  double r0_, r1_, r2_;
  std::size_t grid_points_;
  std::vector<std::size_t> stride_;
};

/// Base environment with extra nonnegative reward added on a subset of
/// terminating states: R_new(x) = R_base(x) + R'(x).
class OneMoreMode final : public DagEnv {
 public:
  OneMoreMode(std::shared_ptr<const DagEnv> base, std::vector<std::pair<StateId, double>> added);

  const DagEnv& base() const { return *base_; }
  std::shared_ptr<const DagEnv> base_ptr() const { return base_; }
  double added_reward(StateId s) const;
  std::span<const std::pair<StateId, double>> added() const { return added_; }

  std::size_t num_states() const override { return base_->num_states(); }
  StateId sink() const override { return base_->sink(); }
  std::vector<Edge> children(StateId s) const override { return base_->children(s); }
  std::vector<Edge> parents(StateId s) const override { return base_->parents(s); }
  bool is_terminating(StateId s) const override { return base_->is_terminating(s); }
  double reward(StateId s) const override;
  std::size_t forward_slots() const override { return base_->forward_slots(); }
  std::size_t backward_slots() const override { return base_->backward_slots(); }
  std::size_t feature_width() const override { return base_->feature_width(); }
  void encode(StateId s, std::span<double> out) const override { base_->encode(s, out); }
  std::size_t num_terminating() const override { return base_->num_terminating(); }
  std::size_t max_trajectory_length() const override { return base_->max_trajectory_length(); }
  std::int64_t mode_region(StateId s) const override { return base_->mode_region(s); }
  std::size_t reachable_terminals(StateId s) const override { return base_->reachable_terminals(s); }
  std::string describe() const override;

 private:
  std::shared_ptr<const DagEnv> base_;
  std::vector<std::pair<StateId, double>> added_;  // sorted by state
};

double hypergrid_reward(std::span<const std::size_t> x, std::size_t side, double r0, double r1, double r2);

/// 10^(-2 log2(H/8) - 1).
double hypergrid_default_r0(std::size_t side);

struct TerminalReward {
  StateId state;
  double reward;
};

/// All terminating states with their rewards, in id order.
std::vector<TerminalReward> enumerate_terminating(const DagEnv& env, std::size_t cap = kDefaultStateCap);

double true_partition_function(const DagEnv& env, std::size_t cap = kDefaultStateCap);

/// Topological order of all states (s0 first, sf last). Throws if a cycle is found.
std::vector<StateId> topological_order(const DagEnv& env, std::size_t cap = kDefaultStateCap);

/// Checks acyclicity, parent/child symmetry and the terminating-state
/// invariants. Returns an empty string on success, otherwise the first problem.
std::string validate_env(const DagEnv& env, std::size_t cap = kDefaultStateCap);

struct OneMoreModePair {
  std::shared_ptr<const DagEnv> previous;  // designated leaf has reward epsilon
  std::shared_ptr<const DagEnv> promoted;  // designated leaf raised to 1
  StateId promoted_leaf;
};

/// Regular tree with unit rewards except the last leaf, which starts at
/// epsilon and is promoted to 1.
OneMoreModePair one_more_mode_tree(std::size_t branching, std::size_t depth, double epsilon);

}  // namespace sgfn
