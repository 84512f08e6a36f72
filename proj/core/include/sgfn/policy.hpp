#pragma once

#include <Eigen/Dense>

#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sgfn/approximator.hpp"
#include "sgfn/env.hpp"
#include "sgfn/rng.hpp"

namespace sgfn {

enum class Provenance { forward, backward, replayed };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

/// Complete path s0 -> ... -> x -> sf with cached log-probabilities.
///
/// log_pf and log_pb sum over the transitions up to x; the final x -> sf
/// transition has probability one in both directions and is not included.
struct Trajectory {
  std::vector<StateId> states;
  double log_pf = 0.0;
  double log_pb = 0.0;
  double reward = 0.0;
  Provenance provenance = Provenance::forward;

  StateId terminal() const { return states[states.size() - 2]; }
  /// Index of x in states.
  std::size_t terminal_index() const { return states.size() - 2; }
};

struct ModelSpec {
  std::string kind = "tabular";  // "tabular" or "mlp"
  std::size_t hidden = 256;
  bool learned_backward = true;
  bool flow_head = false;
  double log_z_init = 0.0;
};

/// Forward and backward policies, log Z, and an optional state-flow head.
///
/// Forward-head outputs double as log edge flows for flow matching; the
/// normalized forward policy is their softmax over valid children. Without a
/// backward head, P_B is uniform over parents. log F(s0) is identified with
/// log Z; log F(x) is log R(x) on terminating states.
struct PolicyModel {
  ParamVector params;
  ModelSpec spec;
  std::shared_ptr<const Approximator> forward_head;
  std::shared_ptr<const Approximator> backward_head;  // null: uniform P_B
  std::shared_ptr<const Approximator> flow_head;      // null: no state flows

  static PolicyModel create(const DagEnv& env, const ModelSpec& spec, Rng& rng);

  double log_z() const { return params.slice("log_z")[0]; }
  void set_log_z(double v) { params.slice("log_z")[0] = v; }
};

/// Evaluates one head on a deduplicated set of states and collects upstream
/// gradients for them.
class HeadBatch {
 public:
  void request(StateId s);
  bool empty() const { return states_.empty(); }
  std::span<const StateId> states() const { return states_; }

  void evaluate(const Approximator& head, std::span<const double> params, const DagEnv& env);
  bool evaluated() const { return out_.cols() == static_cast<Eigen::Index>(states_.size()) && !states_.empty(); }

  Eigen::Index column(StateId s) const { return index_.at(s); }
  auto output(StateId s) const { return out_.col(column(s)); }
  auto upstream(StateId s) { return grad_.col(column(s)); }

  void backprop(const Approximator& head, std::span<const double> params, const DagEnv& env,
                std::span<double> grad) const;

 private:
  std::vector<StateId> states_;
  std::unordered_map<StateId, Eigen::Index> index_;
  Eigen::MatrixXd out_;
  Eigen::MatrixXd grad_;
};

/// log-softmax over the valid slots of one head output column.
/// Returns log p(slot of `chosen`) and writes softmax probabilities per edge.
double masked_log_softmax(const Eigen::Ref<const Eigen::VectorXd>& logits, std::span<const Edge> edges,
                          std::size_t chosen, std::span<double> probs);

/// Canonical edge-by-edge recomputation of (log P_F(tau), log P_B(tau|x)).
std::pair<double, double> trajectory_log_probs(const PolicyModel& model, const DagEnv& env,
                                               std::span<const StateId> states);

/// Forward sampling with epsilon-greedy exploration. Cached log-probabilities
/// come from the un-mixed policy.
Trajectory sample_forward(const PolicyModel& model, const DagEnv& env, Rng& rng, double epsilon);
std::vector<Trajectory> sample_forward_batch(const PolicyModel& model, const DagEnv& env, Rng& rng,
                                             std::size_t count, double epsilon, bool cache_log_probs = true);

/// Walks from terminating state x back to s0 under P_B; returned in forward order.
Trajectory sample_backward(const PolicyModel& model, const DagEnv& env, StateId x, Rng& rng);
std::vector<Trajectory> sample_backward_batch(const PolicyModel& model, const DagEnv& env,
                                              std::span<const StateId> xs, Rng& rng, bool cache_log_probs = true);

/// Forward transition probabilities for every state with at least one child,
/// indexed by state id; entries follow env.children(s) order.
std::vector<std::vector<double>> forward_policy_table(const PolicyModel& model, const DagEnv& env,
                                                      std::size_t cap = kDefaultStateCap);
std::vector<std::vector<double>> backward_policy_table(const PolicyModel& model, const DagEnv& env,
                                                       std::size_t cap = kDefaultStateCap);

struct TerminalDistribution {
  std::vector<StateId> states;  // terminating states in id order
  std::vector<double> probs;
};

/// P_T over terminating states by forward dynamic programming.
TerminalDistribution exact_terminal_distribution(const PolicyModel& model, const DagEnv& env,
                                                 std::size_t cap = kDefaultStateCap);

}  // namespace sgfn
