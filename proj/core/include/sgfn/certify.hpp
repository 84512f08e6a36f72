#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sgfn/env.hpp"
#include "sgfn/policy.hpp"

namespace sgfn {

enum class LossScope { trajectory, transition };

/// 1 - exp(-2c) for trajectory-level losses bounded by c^2, or
/// 1 - exp(-2Lc) for transition-level losses on paths of length at most L.
double tv_bound_from_loss(double c, LossScope scope, std::optional<std::size_t> max_length = std::nullopt);

/// log(1/alpha)/m + log(1/alpha)/n.
double pac_sampling_term(double alpha, std::size_t m, std::size_t n);

/// exp(2c) - 1 + sampling term, before clamping.
double pac_tv_bound_raw(double c, std::size_t m, std::size_t n, double alpha);
/// Clamped to [0, 1].
double pac_tv_bound(double c, std::size_t m, std::size_t n, double alpha);

/// (e^c + (e^c - 1) M) / (e^-c - (1 - e^-c) M) - 1, or nullopt when
/// M >= 1 / (e^c - 1).
std::optional<double> reference_main_term(double c, double max_delta_ratio);

struct ReferenceBound {
  bool condition_ok = false;
  double main_term = 0.0;
  double raw = 0.0;    // main term plus sampling term
  double bound = 1.0;  // clamped
};

ReferenceBound pac_tv_bound_with_reference(double c, double max_delta_ratio, std::size_t m, std::size_t n,
                                           double alpha);

/// (1 - exp(-2c)) * (1 + Delta/Z*), clamped.
double fidelity_tradeoff_bound(double c, double delta_over_zstar);
double fidelity_tradeoff_bound_raw(double c, double delta_over_zstar);

/// Log trajectory flows of one certification sample.
struct FlowSample {
  double log_model_flow;   // log Z + log P_F(tau)
  double log_target_flow;  // log R(x) + log P_B(tau | x)
  StateId terminal = 0;
};

FlowSample flow_sample(const Trajectory& tau, double log_z);
std::vector<FlowSample> flow_samples(std::span<const Trajectory> taus, double log_z);

/// max over samples of delta(tau) / R(tau_hat) at threshold c.
double max_delta_ratio(std::span<const FlowSample> samples, double c);

double alpha_from_confidence(double confidence);

struct CertificateReport {
  std::string kind;              // "loss_to_tv", "pac", "pac_reference_flow", "fidelity_tradeoff"
  std::string scope = "global";  // or "subgraph"
  std::string status = "ok";     // "ok", "condition_violated", "no_forward_samples"
  double bound = 1.0;
  double raw_bound = 0.0;
  double main_term = 0.0;
  double sampling_term = 0.0;
  double c = 0.0;
  double max_delta_ratio = 0.0;
  double alpha = 0.0;
  double confidence = 0.0;
  std::size_t m = 0;
  std::size_t n = 0;
  double c_lo = 0.0;
  double c_hi = 0.0;
  bool optimized = false;
  std::vector<std::pair<double, double>> trace;  // (c, objective) evaluations
  double captured_reward = 0.0;  // subgraph scope: sum of R over X_sub
  double z_estimate = 0.0;       // exp(log Z) of the model
  double wall_seconds = 0.0;

  bool has_bound() const { return status == "ok"; }
};

/// Reference-flow bound at a fixed c; m = backward.size(), n = forward.size().
CertificateReport certificate_at(double c, std::span<const FlowSample> backward, std::span<const FlowSample> forward,
                                 double alpha);

struct OptimizeOptions {
  std::size_t prescan_points = 32;
  double tolerance = 1e-8;
  std::size_t max_iterations = 200;
};

/// Objective minimized by optimize_certificate: main term plus sampling
/// term, +inf where the M condition fails.
double certificate_objective(double c, std::span<const FlowSample> backward, std::span<const FlowSample> forward,
                             double alpha);

/// Minimizes the reference-flow bound over c in [c_lo, c_hi].
CertificateReport optimize_certificate(std::span<const FlowSample> backward, std::span<const FlowSample> forward,
                                       double alpha, const OptimizeOptions& options = {});

/// Same arithmetic restricted to X_sub: forward samples outside X_sub are
/// discarded; backward samples must already be drawn from X_sub.
CertificateReport subgraph_certificate(std::span<const StateId> x_sub, std::span<const FlowSample> backward,
                                       std::span<const FlowSample> forward, double alpha, double log_z,
                                       double captured_reward, bool optimize, double c = 0.0,
                                       const OptimizeOptions& options = {});

struct MonteCarloEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t samples = 0;
};

/// Mean of delta(tau)/R(tau_hat) over target samples.
MonteCarloEstimate mc_delta_over_zstar(std::span<const FlowSample> target_samples, double c);

struct ContrastSummary {
  double lambda_x = 1.0;           // Z*_prev / Z*_new
  double z_prev = 0.0;
  double z_new = 0.0;
  double z_sub_prev = 0.0;         // previous reward mass on X_sub
  double min_singleton = 1.0;      // min over X_sub of R(x) / (R(x) + R'(x))
};

ContrastSummary contrast_summary(std::span<const double> reward, std::span<const double> added);

struct Sandwich {
  double lower = 0.0;
  double upper = 0.0;
  double exact = 0.0;
};

/// Bounds on TV(pi_prev, pi_new) for R_new = R + R'. X_sub is the support of R'.
Sandwich incremental_tv_sandwich(std::span<const double> reward, std::span<const double> added);

/// (log min_{x in X_sub} R(x) / (R(x) + R'(x)))^2.
double loss_supremum(std::span<const double> reward, std::span<const double> added);

/// Draws x proportional to reward restricted to `support` (ties in id order).
class TargetSampler {
 public:
  TargetSampler(std::vector<StateId> support, std::vector<double> weights);
  static TargetSampler from_env(const DagEnv& env, std::size_t cap = kDefaultStateCap);

  StateId operator()(Rng& rng) const;
  std::vector<StateId> sample(Rng& rng, std::size_t count) const;
  std::span<const StateId> support() const { return support_; }
  double total_weight() const { return total_; }

 private:
  std::vector<StateId> support_;
  std::vector<double> cumulative_;
  double total_ = 0.0;
};

/// Backward trajectories from target draws, with cached log-probabilities.
std::vector<Trajectory> sample_target_trajectories(const PolicyModel& model, const DagEnv& env,
                                                   const TargetSampler& sampler, Rng& rng, std::size_t count);

}  // namespace sgfn
