#include "sgfn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "sgfn/oracle.hpp"

namespace sgfn {

std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::max: return "max";
    case Aggregation::mean: return "mean";
    case Aggregation::median: return "median";
  }
  return "?";
}

Aggregation aggregation_from_string(const std::string& s) {
  if (s == "max") return Aggregation::max;
  if (s == "mean") return Aggregation::mean;
  if (s == "median") return Aggregation::median;
  throw std::invalid_argument("unknown aggregation: " + s);
}

std::string to_string(BackwardSource b) { return b == BackwardSource::buffer ? "buffer" : "exact"; }

BackwardSource backward_source_from_string(const std::string& s) {
  if (s == "buffer") return BackwardSource::buffer;
  if (s == "exact") return BackwardSource::exact;
  throw std::invalid_argument("unknown backward_source: " + s);
}

bool TrainConfig::uses_backward_in_gradient() const {
  return backward_in_gradient.value_or(backward_source == BackwardSource::exact);
}

double TrainConfig::alpha() const { return alpha_from_confidence(confidence); }

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (!(tv_target > 0.0 && tv_target < 1.0)) fail("tv_target must lie in (0, 1)");
  if (!(confidence > 0.0 && confidence < 1.0)) fail("confidence must lie in (0, 1)");
  (void)alpha();
  if (!(beta > 0.0 && beta <= 1.0)) fail("beta must lie in (0, 1]");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (stabilized && batch_size < 2) fail("stabilized training needs batch_size >= 2");
  if (stabilized && objective != Objective::tb) fail("stabilized training uses the tb objective");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) fail("epsilon must lie in [0, 1)");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(log_z_lr_multiplier > 0.0)) fail("log_z_lr_multiplier must be positive");
  if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
  if (patience < 1) fail("patience must be >= 1");
  if (buffer_size < 1) fail("buffer_size must be >= 1");
  if (!(replay_fraction >= 0.0 && replay_fraction < 1.0)) fail("replay_fraction must lie in [0, 1)");
  if (replay_fraction > 0.0 && replay_size == 0) fail("replay_fraction needs replay_size > 0");
  if (!(subtb_lambda > 0.0)) fail("subtb_lambda must be positive");
  if (initial_threshold && !(*initial_threshold >= 0.0)) fail("initial_threshold must be nonnegative");
}

// ---------------------------------------------------------------- TopKBuffer

TopKBuffer::TopKBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("TopKBuffer: capacity must be positive");
}

bool TopKBuffer::insert(StateId s, double reward) {
  if (members_.contains(s)) return false;
  if (by_reward_.size() == capacity_) {
    auto worst = std::prev(by_reward_.end());
    if (!(reward > worst->reward)) return false;
    members_.erase(worst->state);
    by_reward_.erase(worst);
  }
  by_reward_.insert(Key{reward, s});
  members_.insert(s);
  return true;
}

double TopKBuffer::min_reward() const { return by_reward_.empty() ? 0.0 : std::prev(by_reward_.end())->reward; }

double TopKBuffer::total_reward() const {
  double total = 0.0;
  for (const auto& k : by_reward_) total += k.reward;
  return total;
}

std::vector<std::pair<StateId, double>> TopKBuffer::items() const {
  std::vector<std::pair<StateId, double>> out;
  out.reserve(by_reward_.size());
  for (const auto& k : by_reward_) out.emplace_back(k.state, k.reward);
  return out;
}

std::vector<StateId> TopKBuffer::states() const {
  std::vector<StateId> out;
  out.reserve(by_reward_.size());
  for (const auto& k : by_reward_) out.push_back(k.state);
  return out;
}

// -------------------------------------------------------------- ReplayBuffer

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {}

void ReplayBuffer::insert(const Trajectory& tau) {
  if (capacity_ == 0) return;
  if (items_.size() == capacity_ && !(tau.reward > items_.back().reward)) return;
  auto pos = std::upper_bound(items_.begin(), items_.end(), tau.reward,
                              [](double r, const Trajectory& t) { return r > t.reward; });
  Trajectory copy = tau;
  copy.provenance = Provenance::replayed;
  items_.insert(pos, std::move(copy));
  if (items_.size() > capacity_) items_.pop_back();
}

std::vector<Trajectory> ReplayBuffer::sample(std::size_t count, Rng& rng) const {
  if (items_.empty()) throw std::logic_error("ReplayBuffer: sampling from an empty buffer");
  std::vector<double> w;
  w.reserve(items_.size());
  for (const auto& t : items_) w.push_back(t.reward);
  std::vector<Trajectory> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(items_[sample_categorical(w, rng)]);
  return out;
}

double update_threshold(double c, std::span<const double> tb_losses, double beta, Aggregation aggregation) {
  if (tb_losses.empty()) throw std::invalid_argument("update_threshold: empty batch");
  if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("update_threshold: beta must lie in (0, 1]");
  std::vector<double> roots(tb_losses.size());
  for (std::size_t i = 0; i < roots.size(); ++i) roots[i] = std::sqrt(tb_losses[i]);
  double agg = 0.0;
  switch (aggregation) {
    case Aggregation::max: agg = *std::max_element(roots.begin(), roots.end()); break;
    case Aggregation::mean:
      for (double r : roots) agg += r;
      agg /= static_cast<double>(roots.size());
      break;
    case Aggregation::median: {
      std::sort(roots.begin(), roots.end());
      const std::size_t h = roots.size() / 2;
      agg = roots.size() % 2 ? roots[h] : 0.5 * (roots[h - 1] + roots[h]);
      break;
    }
  }
  return (1.0 - beta) * c + beta * agg;
}

// ------------------------------------------------------------------ metrics

std::string metrics_csv_header() {
  return "round,objective,mean_loss,max_loss,max_to_rest,mean_tb_loss,c,mean_delta,active_delta_fraction,"
         "buffer_size,buffer_min_reward,certificate_bound,certificate_main_term,pool_m,pool_n,skipped,"
         "gradient_step,forward_only,grad_norm,log_z,exact_tv,total_l1,modes,mode_regions,exited";
}

std::string metrics_csv_row(const RoundMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(17);
  auto opt = [&](bool present, double v) {
    if (present) os << v;
    os << ',';
  };
  os << m.round << ',' << m.objective << ',' << m.mean_loss << ',' << m.max_loss << ',' << m.max_to_rest << ','
     << m.mean_tb_loss << ',' << m.c << ',' << m.mean_delta << ',' << m.active_delta_fraction << ','
     << m.buffer_size << ',' << m.buffer_min_reward << ',';
  opt(m.certificate_computed, m.certificate_bound);
  opt(m.certificate_computed, m.certificate_main_term);
  os << m.pool_m << ',' << m.pool_n << ',' << m.skipped << ',' << m.gradient_step << ',' << m.forward_only_fallback
     << ',' << m.grad_norm << ',' << m.log_z << ',';
  opt(m.exact_tv.has_value(), m.exact_tv.value_or(0.0));
  opt(m.total_l1.has_value(), m.total_l1.value_or(0.0));
  os << m.modes << ',' << m.mode_regions << ',' << m.exited;
  return os.str();
}

// ------------------------------------------------------------------ Trainer

Trainer::Trainer(std::shared_ptr<const DagEnv> env, PolicyModel model, TrainConfig config)
    : env_(std::move(env)), model_(std::move(model)), config_(std::move(config)) {
  config_.validate();
  if (objective_needs_flow_head(config_.objective) && !model_.flow_head)
    throw std::invalid_argument(to_string(config_.objective) + " needs a model with a state-flow head");
  optimizer_ = AdamOptimizer(model_.params, config_.learning_rate);
  optimizer_.set_learning_rate("log_z", config_.learning_rate * config_.log_z_lr_multiplier);
  state_.buffer = TopKBuffer(config_.buffer_size);
  state_.replay = ReplayBuffer(config_.replay_size);
  rng_ = make_rng(config_.seed, "train");
  if (config_.initial_threshold) {
    state_.c = *config_.initial_threshold;
    state_.c_initialized = true;
  }
  if (config_.backward_source == BackwardSource::exact) exact_sampler_ = TargetSampler::from_env(*env_);
}

const CertificateReport* Trainer::last_certificate() const {
  return state_.certificates.empty() ? nullptr : &state_.certificates.back().second;
}

void Trainer::clear_pool() {
  state_.pool_backward.clear();
  state_.pool_forward.clear();
}

void Trainer::observe_terminals(std::span<const Trajectory> taus, RoundMetrics& m, bool& buffer_changed) {
  for (const auto& t : taus) {
    // Any terminating state along the path counts; with terminating states
    // leading only to the sink that is the final one.
    for (std::size_t i = 0; i + 1 < t.states.size(); ++i) {
      const StateId s = t.states[i];
      if (!env_->is_terminating(s)) continue;
      buffer_changed = state_.buffer.insert(s, env_->reward(s)) || buffer_changed;
      if (t.provenance == Provenance::forward) {
        const auto region = env_->mode_region(s);
        if (region >= 0) {
          state_.modes_seen.insert(s);
          state_.regions_seen.insert(region);
        }
      }
    }
  }
  m.buffer_size = state_.buffer.size();
  m.buffer_min_reward = state_.buffer.min_reward();
  m.modes = state_.modes_seen.size();
  m.mode_regions = state_.regions_seen.size();
}

double Trainer::gradient_step(std::span<const Trajectory> batch, const LossOptions& options,
                              LossBatchReport& report) {
  std::vector<double> grad(model_.params.size(), 0.0);
  report = evaluate_objective(model_, *env_, batch, options, grad);
  const double norm = clip_grad_norm(grad, config_.grad_clip);
  optimizer_.step(model_.params, grad);
  return norm;
}

void Trainer::fill_eval(RoundMetrics& m) {
  if (!config_.oracle || config_.eval_every == 0) return;
  const bool last = state_.exited || state_.round >= config_.max_rounds;
  if (m.round % config_.eval_every != 0 && !last) return;
  try {
    const double l1 = exact_total_l1(model_, *env_);
    m.total_l1 = l1;
    m.exact_tv = 0.5 * l1;
  } catch (const CapExceeded&) {
    config_.oracle = false;
  }
}

namespace {

void cache_from_report(std::span<Trajectory> taus, const LossBatchReport& rep, double log_z) {
  for (std::size_t i = 0; i < taus.size(); ++i) {
    taus[i].log_pf = rep.log_model_flow[i] - log_z;
    taus[i].log_pb = rep.log_target_flow[i] - std::log(taus[i].reward);
  }
}

void fill_loss_metrics(RoundMetrics& m, const LossBatchReport& rep) {
  m.mean_loss = rep.mean;
  m.max_loss = rep.max;
  m.max_to_rest = rep.max_to_rest;
  double tb = 0.0;
  for (double v : rep.tb_losses) tb += v;
  m.mean_tb_loss = tb / static_cast<double>(rep.tb_losses.size());
  m.mean_delta = rep.mean_delta;
  m.active_delta_fraction = rep.active_delta_fraction;
}

}  // namespace

RoundMetrics Trainer::stable_round() {
  RoundMetrics m;
  m.round = state_.round + 1;
  m.objective = "stable_tb";
  const bool exact = config_.backward_source == BackwardSource::exact;
  const bool have_backward = exact || !state_.buffer.empty();
  const std::size_t nf = have_backward ? config_.batch_size / 2 : config_.batch_size;
  const std::size_t nb = config_.batch_size - nf;
  m.forward_only_fallback = !have_backward;

  const double eps = state_.accumulating ? 0.0 : config_.epsilon;
  std::vector<Trajectory> fwd = sample_forward_batch(model_, *env_, rng_, nf, eps, false);
  std::vector<Trajectory> bwd;
  if (have_backward && nb > 0) {
    std::vector<StateId> xs;
    if (exact) {
      xs = exact_sampler_->sample(rng_, nb);
    } else {
      std::vector<StateId> s;
      std::vector<double> w;
      for (const auto& [state, reward] : state_.buffer.items()) {
        s.push_back(state);
        w.push_back(reward);
      }
      xs = TargetSampler(std::move(s), std::move(w)).sample(rng_, nb);
    }
    bwd = sample_backward_batch(model_, *env_, xs, rng_, false);
  }

  // Losses (and a provisional gradient) under the current parameters.
  const bool bwd_in_grad = config_.uses_backward_in_gradient();
  std::vector<Trajectory> train = fwd;
  if (bwd_in_grad) train.insert(train.end(), bwd.begin(), bwd.end());
  LossOptions opts;
  opts.objective = Objective::tb;
  opts.reference_threshold = state_.c_initialized ? state_.c : std::numeric_limits<double>::infinity();
  std::vector<double> grad(model_.params.size(), 0.0);
  const LossBatchReport rep = evaluate_objective(model_, *env_, train, opts, grad);
  const double log_z = model_.log_z();
  cache_from_report(std::span(train).first(fwd.size()), rep, log_z);
  std::copy(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(fwd.size()), fwd.begin());
  if (bwd_in_grad) {
    for (std::size_t i = 0; i < bwd.size(); ++i) {
      bwd[i].log_pf = rep.log_model_flow[fwd.size() + i] - log_z;
      bwd[i].log_pb = rep.log_target_flow[fwd.size() + i] - std::log(bwd[i].reward);
    }
  } else if (!bwd.empty()) {
    const LossBatchReport brep = evaluate_objective(model_, *env_, bwd, LossOptions{});
    cache_from_report(bwd, brep, log_z);
  }
  fill_loss_metrics(m, rep);
  if (!state_.c_initialized) {
    state_.c = update_threshold(0.0, rep.tb_losses, 1.0, config_.aggregation);
    state_.c_initialized = true;
  }

  // Top-K buffer and patience.
  bool changed = false;
  observe_terminals(fwd, m, changed);
  observe_terminals(bwd, m, changed);
  if (changed) {
    state_.patience_counter = 0;
    state_.accumulating = false;
    clear_pool();
  } else {
    ++state_.patience_counter;
    for (const auto& s : flow_samples(bwd, log_z)) state_.pool_backward.push_back(s);
    if (eps == 0.0) {
      for (const auto& s : flow_samples(fwd, log_z)) state_.pool_forward.push_back(s);
    }
  }

  if (state_.patience_counter >= config_.patience) {
    state_.patience_counter = 0;
    const double alpha = config_.alpha();
    std::vector<StateId> x_sub;
    double captured = 0.0;
    if (exact) {
      for (const auto& t : enumerate_terminating(*env_)) {
        x_sub.push_back(t.state);
        captured += t.reward;
      }
    } else {
      x_sub = state_.buffer.states();
      captured = state_.buffer.total_reward();
    }
    CertificateReport cert = subgraph_certificate(x_sub, state_.pool_backward, state_.pool_forward, alpha, log_z,
                                                  captured, false, state_.c);
    if (exact) cert.scope = "global";
    // The skip rule looks only at the non-sampling term, which needs no
    // forward samples.
    std::vector<FlowSample> all = state_.pool_backward;
    const std::unordered_set<StateId> members(x_sub.begin(), x_sub.end());
    for (const auto& s : state_.pool_forward) {
      if (members.contains(s.terminal)) all.push_back(s);
    }
    const auto main = all.empty() ? std::nullopt : reference_main_term(state_.c, max_delta_ratio(all, state_.c));
    state_.accumulating = main.has_value() && *main < config_.tv_target;
    m.certificate_computed = true;
    m.certificate_main_term = main.value_or(std::numeric_limits<double>::infinity());
    m.certificate_bound = cert.has_bound() ? cert.bound : 1.0;
    if (cert.has_bound() && cert.bound <= config_.tv_target && config_.early_exit) state_.exited = true;
    state_.certificates.emplace_back(m.round, std::move(cert));
  }
  m.pool_m = state_.pool_backward.size();
  m.pool_n = state_.pool_forward.size();

  if (state_.accumulating || state_.exited) {
    m.skipped = true;
  } else {
    m.grad_norm = clip_grad_norm(grad, config_.grad_clip);
    optimizer_.step(model_.params, grad);
    m.gradient_step = true;
    clear_pool();
    state_.c = update_threshold(state_.c, rep.tb_losses, config_.beta, config_.aggregation);
  }
  m.c = state_.c;
  m.log_z = model_.log_z();
  m.exited = state_.exited;
  return m;
}

RoundMetrics Trainer::baseline_round() {
  RoundMetrics m;
  m.round = state_.round + 1;
  m.objective = to_string(config_.objective);
  std::size_t nr = 0;
  if (config_.replay_fraction > 0.0 && state_.replay.size() > 0) {
    nr = static_cast<std::size_t>(std::floor(config_.replay_fraction * static_cast<double>(config_.batch_size)));
  }
  std::vector<Trajectory> batch = sample_forward_batch(model_, *env_, rng_, config_.batch_size - nr, config_.epsilon,
                                                       false);
  bool changed = false;
  observe_terminals(batch, m, changed);
  for (const auto& t : batch) state_.replay.insert(t);
  if (nr > 0) {
    auto replayed = state_.replay.sample(nr, rng_);
    batch.insert(batch.end(), replayed.begin(), replayed.end());
  }
  LossOptions opts;
  opts.objective = config_.objective;
  opts.subtb_lambda = config_.subtb_lambda;
  LossBatchReport rep;
  m.grad_norm = gradient_step(batch, opts, rep);
  m.gradient_step = true;
  fill_loss_metrics(m, rep);
  if (!state_.c_initialized) {
    state_.c = update_threshold(0.0, rep.tb_losses, 1.0, config_.aggregation);
    state_.c_initialized = true;
  } else {
    state_.c = update_threshold(state_.c, rep.tb_losses, config_.beta, config_.aggregation);
  }
  m.c = state_.c;
  m.log_z = model_.log_z();
  return m;
}

RoundMetrics Trainer::step() {
  if (finished()) throw std::logic_error("Trainer::step called after training finished");
  RoundMetrics m = config_.stabilized ? stable_round() : baseline_round();
  ++state_.round;
  fill_eval(m);
  return m;
}

std::vector<RoundMetrics> Trainer::run(const std::function<void(const RoundMetrics&)>& on_round) {
  std::vector<RoundMetrics> out;
  while (!finished()) {
    out.push_back(step());
    if (on_round) on_round(out.back());
  }
  return out;
}

}  // namespace sgfn
