#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sgfn/env.hpp"
#include "sgfn/policy.hpp"

namespace sgfn {

enum class Objective { tb, db, fm, subtb, wdb };

std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);

/// Objectives other than TB and FM read log-state-flows from the flow head.
bool objective_needs_flow_head(Objective o);

// Scalar forms. Every argument is in the log domain.

/// (log Z + log P_F - log R - log P_B)^2
double tb_loss(double log_z, double log_pf, double log_reward, double log_pb);
double tb_loss(const Trajectory& tau, double log_z);

/// (log F(s) + log P_F(s,s') - log F(s') - log P_B(s,s'))^2. Also the
/// sub-trajectory loss when the policy terms are summed over the span.
double db_loss(double log_flow_from, double log_pf, double log_flow_to, double log_pb);

/// (log inflow - log outflow)^2 where outflow already includes R(s').
double fm_loss(double log_inflow, double log_outflow);

/// Per-transition weights for a trajectory s0..x,sf, including the final
/// x -> sf transition. Weight is proportional to 1 / (terminating states
/// reachable through the edge) and the weights sum to one.
std::vector<double> wdb_weights(const DagEnv& env, std::span<const StateId> states);

/// Smallest log delta with |log((M + delta) / (T + delta))| <= c, where M and
/// T are the model and target trajectory flows. -inf means delta = 0 and +inf
/// means no finite delta exists (c = 0 with an unbalanced trajectory).
double reference_flow_log_delta(double log_model_flow, double log_target_flow, double c);
double reference_flow_delta(double log_model_flow, double log_target_flow, double c);

/// log((M + delta) / (T + delta)), given log delta.
double augmented_log_ratio(double log_model_flow, double log_target_flow, double log_delta);
double augmented_loss(double log_model_flow, double log_target_flow, double delta);

/// sqrt(L_TB / L_aug). Throws when the unaugmented loss is zero.
double reduction_factor_gamma(double log_model_flow, double log_target_flow, double delta);

/// max_i L_i / sum_{j != i} L_j for the argmax i; +inf when the rest sums to 0.
double max_to_rest_ratio(std::span<const double> losses);

/// Model quantities along one trajectory s0..x,sf (n = index of x).
struct TrajectoryTerms {
  std::vector<double> log_pf;    // n entries, edge t = s_t -> s_{t+1}
  std::vector<double> log_pb;    // n entries
  std::vector<double> log_flow;  // n + 1 entries; [0] = log Z, [n] = log R(x), others from the flow head
};

TrajectoryTerms trajectory_terms(const PolicyModel& model, const DagEnv& env, std::span<const StateId> states);

/// Flow-matching loss at a state other than s0 and sf, using forward-head
/// outputs as log edge flows.
double fm_state_loss(const PolicyModel& model, const DagEnv& env, StateId s);

struct LossOptions {
  Objective objective = Objective::tb;
  double subtb_lambda = 0.9;
  /// When set, TB is replaced by the reference-flow augmented loss at this threshold.
  std::optional<double> reference_threshold;
  /// Optional per-trajectory log reference flows used instead of recomputing
  /// them from the threshold (lets finite differences hold them fixed).
  std::vector<double> fixed_log_deltas;
};

struct LossBatchReport {
  Objective objective = Objective::tb;
  bool stabilized = false;
  double threshold = 0.0;

  std::vector<double> item_losses;      // the optimized per-trajectory losses
  std::vector<double> tb_losses;        // unaugmented TB per trajectory
  std::vector<double> log_model_flow;   // log Z + log P_F(tau)
  std::vector<double> log_target_flow;  // log R(x) + log P_B(tau | x)
  std::vector<double> log_deltas;       // -inf where delta = 0

  double mean = 0.0;
  double max = 0.0;
  double max_to_rest = 0.0;
  double mean_delta = 0.0;
  double active_delta_fraction = 0.0;

  std::vector<double> log_ratios() const;
};

/// Evaluates the batch objective (mean over trajectories) from the current
/// parameters. If grad is non-empty it must span the whole parameter vector;
/// the gradient of the batch mean is added to it. Reference flows are held
/// constant when differentiating.
LossBatchReport evaluate_objective(const PolicyModel& model, const DagEnv& env, std::span<const Trajectory> batch,
                                   const LossOptions& options, std::span<double> grad = {});

}  // namespace sgfn
