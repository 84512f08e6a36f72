#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sgfn/env.hpp"
#include "sgfn/policy.hpp"

namespace sgfn {

inline constexpr std::size_t kDefaultTrajectoryCap = 5'000'000;

/// Reward-proportional flows with a uniform backward split.
struct ExactFlows {
  std::vector<double> state_flow;               // by state id; sf carries Z*
  std::vector<std::vector<double>> edge_flow;   // by state id, aligned with children(s)
  double z_star = 0.0;
};

ExactFlows exact_flows(const DagEnv& env, std::size_t cap = kDefaultStateCap);

/// pi_target(x) = R(x) / Z* over terminating states in id order.
TerminalDistribution target_distribution(const DagEnv& env, std::size_t cap = kDefaultStateCap);

/// TV(P_T, pi_target), half the exact total L1 error.
double exact_tv(const PolicyModel& model, const DagEnv& env, std::size_t cap = kDefaultStateCap);
double exact_total_l1(const PolicyModel& model, const DagEnv& env, std::size_t cap = kDefaultStateCap);

/// sum over all x of |freq(x) - pi_target(x)|, unseen states contributing their target mass.
double empirical_total_l1(std::span<const StateId> terminal_samples, const DagEnv& env,
                          std::size_t cap = kDefaultStateCap);

/// Distinct sampled states whose mode_region is nonnegative.
std::size_t count_modes(std::span<const StateId> terminal_samples, const DagEnv& env);
/// Distinct mode regions hit by the samples.
std::size_t count_mode_regions(std::span<const StateId> terminal_samples, const DagEnv& env);
/// Number of mode regions present in the environment.
std::size_t total_mode_regions(const DagEnv& env, std::size_t cap = kDefaultStateCap);

struct EvalReport {
  double exact_tv = -1.0;  // negative when not computed
  double empirical_l1 = 0.0;
  std::size_t modes = 0;
  std::size_t mode_regions = 0;
  std::size_t samples = 0;
};

/// Tabular model with forward logits log F_edge, zero backward logits, log
/// state flows in the flow head (if requested) and log Z = log Z*.
PolicyModel balanced_tabular_model(const DagEnv& env, bool learned_backward = true, bool flow_head = true,
                                   std::size_t cap = kDefaultStateCap);

/// Tabular model with i.i.d. uniform(-scale, scale) logits in every head.
PolicyModel random_tabular_model(const DagEnv& env, Rng& rng, double scale, bool learned_backward = true,
                                 bool flow_head = false);

/// The balanced model with uniform(-noise, noise) added to every parameter.
PolicyModel perturbed_balanced_model(const DagEnv& env, Rng& rng, double noise, bool learned_backward = true);

/// All complete state sequences s0 .. x, sf by depth-first search.
std::vector<std::vector<StateId>> enumerate_paths(const DagEnv& env, std::size_t cap = kDefaultTrajectoryCap);

struct EnumeratedTrajectory {
  Trajectory tau;            // log_pf, log_pb and reward from the model and env
  double log_target = 0.0;   // log pi_hat(tau) = log R(x) - log Z* + log P_B(tau | x)
};

std::vector<EnumeratedTrajectory> enumerate_trajectories(const PolicyModel& model, const DagEnv& env,
                                                         std::size_t cap = kDefaultTrajectoryCap);

/// Largest TB loss over every complete trajectory.
double max_trajectory_tb_loss(const PolicyModel& model, const DagEnv& env, std::size_t cap = kDefaultTrajectoryCap);

/// sum over all trajectories of delta(tau) / Z*, with delta at threshold c.
double exact_delta_over_zstar(const PolicyModel& model, const DagEnv& env, double c,
                              std::size_t cap = kDefaultTrajectoryCap);

/// TV between the old and new reward-proportional distributions when one
/// leaf of a unit-reward g-ary tree of depth h is promoted from epsilon to 1.
double one_more_mode_tv_closed_form(std::size_t branching, std::size_t depth, double epsilon);

/// Half L1 between two reward vectors after normalization.
double reward_tv(std::span<const double> a, std::span<const double> b);

}  // namespace sgfn
