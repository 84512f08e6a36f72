#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "sgfn/certify.hpp"
#include "sgfn/env.hpp"
#include "sgfn/losses.hpp"
#include "sgfn/optimizer.hpp"
#include "sgfn/policy.hpp"

namespace sgfn {

enum class Aggregation { max, mean, median };
enum class BackwardSource { buffer, exact };

std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);
std::string to_string(BackwardSource b);
BackwardSource backward_source_from_string(const std::string& s);

struct TrainConfig {
  Objective objective = Objective::tb;
  bool stabilized = true;
  double tv_target = 0.01;
  double confidence = 0.95;
  std::size_t patience = 10;
  std::size_t buffer_size = 10000;
  std::size_t batch_size = 32;
  double beta = 0.05;
  Aggregation aggregation = Aggregation::max;
  double epsilon = 0.05;
  double learning_rate = 1e-3;
  double log_z_lr_multiplier = 100.0;
  double grad_clip = 10.0;
  std::size_t replay_size = 0;  // 0 disables replay
  double replay_fraction = 0.0;  // share of a baseline batch drawn from replay
  std::size_t max_rounds = 5000;
  std::uint64_t seed = 0;
  double subtb_lambda = 0.9;
  BackwardSource backward_source = BackwardSource::buffer;
  std::optional<bool> backward_in_gradient;  // unset: on for exact, off for buffer
  std::optional<double> initial_threshold;   // unset: first batch's max sqrt TB loss
  bool early_exit = true;
  std::size_t eval_every = 10;  // exact-oracle metrics cadence; 0 disables
  bool oracle = true;

  bool uses_backward_in_gradient() const;
  double alpha() const;
  /// Throws std::invalid_argument describing the first invalid field.
  void validate() const;
};

/// Up to K distinct terminating states with the highest rewards.
class TopKBuffer {
 public:
  explicit TopKBuffer(std::size_t capacity = 10000);

  /// Returns true when the contents changed.
  bool insert(StateId s, double reward);

  std::size_t size() const { return by_reward_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return by_reward_.empty(); }
  bool contains(StateId s) const { return members_.contains(s); }
  double min_reward() const;
  double total_reward() const;

  /// (state, reward) ordered by reward descending, ties by state ascending.
  std::vector<std::pair<StateId, double>> items() const;
  std::vector<StateId> states() const;

 private:
  struct Key {
    double reward;
    StateId state;
    bool operator<(const Key& o) const { return reward != o.reward ? reward > o.reward : state < o.state; }
  };
  std::size_t capacity_;
  std::set<Key> by_reward_;
  std::unordered_set<StateId> members_;
};

/// Reward-prioritized trajectory replay.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  /// Keeps the highest-reward trajectories up to capacity.
  void insert(const Trajectory& tau);
  /// Draws with probability proportional to reward; throws when empty.
  std::vector<Trajectory> sample(std::size_t count, Rng& rng) const;

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::vector<Trajectory>& items() const { return items_; }

 private:
  std::size_t capacity_;
  std::vector<Trajectory> items_;  // sorted by reward descending, stable in insertion order
};

/// c_{t+1} = (1 - beta) c_t + beta * agg_i sqrt(L_TB(tau_i)).
double update_threshold(double c, std::span<const double> tb_losses, double beta,
                        Aggregation aggregation = Aggregation::max);

struct RoundMetrics {
  std::size_t round = 0;
  std::string objective;
  double mean_loss = 0.0;
  double max_loss = 0.0;
  double max_to_rest = 0.0;
  double mean_tb_loss = 0.0;
  double c = 0.0;
  double mean_delta = 0.0;
  double active_delta_fraction = 0.0;
  std::size_t buffer_size = 0;
  double buffer_min_reward = 0.0;
  bool certificate_computed = false;
  double certificate_bound = 0.0;
  double certificate_main_term = 0.0;
  std::size_t pool_m = 0;
  std::size_t pool_n = 0;
  bool skipped = false;
  bool gradient_step = false;
  bool forward_only_fallback = false;
  double grad_norm = 0.0;
  double log_z = 0.0;
  std::optional<double> exact_tv;
  std::optional<double> total_l1;
  std::size_t modes = 0;
  std::size_t mode_regions = 0;
  bool exited = false;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const RoundMetrics& m);

struct TrainState {
  std::size_t round = 0;
  double c = 0.0;
  bool c_initialized = false;
  std::size_t patience_counter = 0;
  TopKBuffer buffer;
  ReplayBuffer replay{0};
  bool accumulating = false;
  std::vector<FlowSample> pool_backward;
  std::vector<FlowSample> pool_forward;
  std::vector<std::pair<std::size_t, CertificateReport>> certificates;
  std::set<StateId> modes_seen;
  std::set<std::int64_t> regions_seen;
  bool exited = false;
};

/// Runs Stable GFlowNet rounds (reference-flow TB with patience-gated
/// certification and skip-to-accumulate) or a plain baseline objective.
class Trainer {
 public:
  Trainer(std::shared_ptr<const DagEnv> env, PolicyModel model, TrainConfig config);

  RoundMetrics step();

  /// Runs until max_rounds or an early certified exit.
  std::vector<RoundMetrics> run(const std::function<void(const RoundMetrics&)>& on_round = {});

  bool finished() const { return state_.exited || state_.round >= config_.max_rounds; }

  const PolicyModel& model() const { return model_; }
  PolicyModel& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  AdamOptimizer& optimizer() { return optimizer_; }
  const AdamOptimizer& optimizer() const { return optimizer_; }
  const DagEnv& env() const { return *env_; }
  Rng& rng() { return rng_; }

  /// Latest certificate, if any.
  const CertificateReport* last_certificate() const;

 private:
  RoundMetrics stable_round();
  RoundMetrics baseline_round();
  void observe_terminals(std::span<const Trajectory> taus, RoundMetrics& m, bool& buffer_changed);
  double gradient_step(std::span<const Trajectory> batch, const LossOptions& options, LossBatchReport& report);
  void fill_eval(RoundMetrics& m);
  void clear_pool();

  std::shared_ptr<const DagEnv> env_;
  PolicyModel model_;
  TrainConfig config_;
  AdamOptimizer optimizer_;
  TrainState state_;
  Rng rng_;
  std::optional<TargetSampler> exact_sampler_;
};

}  // namespace sgfn
