#include "sgfn/certify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

#include "sgfn/losses.hpp"

namespace sgfn {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 0.5)) throw std::invalid_argument("alpha must lie in (0, 0.5)");
}

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

}  // namespace

double tv_bound_from_loss(double c, LossScope scope, std::optional<std::size_t> max_length) {
  if (!(c >= 0.0)) throw std::invalid_argument("tv_bound_from_loss: c must be nonnegative");
  if (scope == LossScope::trajectory) return 1.0 - std::exp(-2.0 * c);
  if (!max_length || *max_length < 1) throw std::invalid_argument("transition scope needs a path length >= 1");
  return 1.0 - std::exp(-2.0 * static_cast<double>(*max_length) * c);
}

double pac_sampling_term(double alpha, std::size_t m, std::size_t n) {
  check_alpha(alpha);
  if (m == 0 || n == 0) throw std::invalid_argument("sampling certificates need m, n >= 1");
  const double l = std::log(1.0 / alpha);
  return l / static_cast<double>(m) + l / static_cast<double>(n);
}

double pac_tv_bound_raw(double c, std::size_t m, std::size_t n, double alpha) {
  return std::expm1(2.0 * c) + pac_sampling_term(alpha, m, n);
}

double pac_tv_bound(double c, std::size_t m, std::size_t n, double alpha) {
  return clamp01(pac_tv_bound_raw(c, m, n, alpha));
}

std::optional<double> reference_main_term(double c, double M) {
  if (!(c >= 0.0) || !(M >= 0.0)) throw std::invalid_argument("reference_main_term: need c >= 0 and M >= 0");
  const double em1 = std::expm1(c);  // e^c - 1
  if (M > 0.0 && !(M * em1 < 1.0)) return std::nullopt;
  if (M == 0.0) return std::expm1(2.0 * c);
  const double num = std::exp(c) + em1 * M;
  const double den = std::exp(-c) - (-std::expm1(-c)) * M;
  if (!(den > 0.0)) return std::nullopt;
  return num / den - 1.0;
}

ReferenceBound pac_tv_bound_with_reference(double c, double M, std::size_t m, std::size_t n, double alpha) {
  ReferenceBound r;
  const double s = pac_sampling_term(alpha, m, n);
  const auto main = reference_main_term(c, M);
  if (!main) return r;
  r.condition_ok = true;
  r.main_term = *main;
  r.raw = *main + s;
  r.bound = clamp01(r.raw);
  return r;
}

double fidelity_tradeoff_bound_raw(double c, double delta_over_zstar) {
  if (!(c >= 0.0) || !(delta_over_zstar >= 0.0)) throw std::invalid_argument("fidelity bound: negative input");
  return -std::expm1(-2.0 * c) * (1.0 + delta_over_zstar);
}

double fidelity_tradeoff_bound(double c, double delta_over_zstar) {
  return clamp01(fidelity_tradeoff_bound_raw(c, delta_over_zstar));
}

FlowSample flow_sample(const Trajectory& tau, double log_z) {
  if (!(tau.reward > 0.0)) throw std::invalid_argument("flow_sample: reward must be positive");
  return {log_z + tau.log_pf, std::log(tau.reward) + tau.log_pb, tau.terminal()};
}

std::vector<FlowSample> flow_samples(std::span<const Trajectory> taus, double log_z) {
  std::vector<FlowSample> out;
  out.reserve(taus.size());
  for (const auto& t : taus) out.push_back(flow_sample(t, log_z));
  return out;
}

double max_delta_ratio(std::span<const FlowSample> samples, double c) {
  double M = 0.0;
  for (const auto& s : samples) {
    const double ld = reference_flow_log_delta(s.log_model_flow, s.log_target_flow, c);
    if (ld == -kInf) continue;
    M = std::max(M, std::exp(ld - s.log_target_flow));
  }
  return M;
}

double alpha_from_confidence(double confidence) {
  if (!(confidence > 0.0 && confidence < 1.0)) throw std::invalid_argument("confidence must lie in (0, 1)");
  const double alpha = (1.0 - confidence) / 2.0;
  check_alpha(alpha);
  return alpha;
}

// ----------------------------------------------------------- certificates

namespace {

double joint_max_ratio(std::span<const FlowSample> a, std::span<const FlowSample> b, double c) {
  return std::max(max_delta_ratio(a, c), max_delta_ratio(b, c));
}

double max_abs_log_ratio(std::span<const FlowSample> a, std::span<const FlowSample> b) {
  double hi = 0.0;
  for (auto set : {a, b}) {
    for (const auto& s : set) hi = std::max(hi, std::abs(s.log_model_flow - s.log_target_flow));
  }
  return hi;
}

double feasibility_floor(std::span<const FlowSample> a, std::span<const FlowSample> b) {
  double lo = 0.0;
  for (auto set : {a, b}) {
    for (const auto& s : set) {
      // Only model flow above target flow can violate M (e^c - 1) < 1.
      const double r = s.log_model_flow - s.log_target_flow;
      if (r <= std::log(2.0)) continue;
      // log(ratio - 1) with ratio = e^r > 2
      lo = std::max(lo, r + std::log(-std::expm1(-r)));
    }
  }
  return lo;
}

void fill_at(CertificateReport& rep, double c, std::span<const FlowSample> backward,
             std::span<const FlowSample> forward) {
  rep.c = c;
  rep.max_delta_ratio = joint_max_ratio(backward, forward, c);
  const auto r = pac_tv_bound_with_reference(c, rep.max_delta_ratio, rep.m, rep.n, rep.alpha);
  rep.sampling_term = pac_sampling_term(rep.alpha, rep.m, rep.n);
  if (!r.condition_ok) {
    rep.status = "condition_violated";
    rep.main_term = kInf;
    rep.raw_bound = kInf;
    rep.bound = 1.0;
    return;
  }
  rep.status = "ok";
  rep.main_term = r.main_term;
  rep.raw_bound = r.raw;
  rep.bound = r.bound;
}

CertificateReport base_report(std::span<const FlowSample> backward, std::span<const FlowSample> forward,
                              double alpha) {
  check_alpha(alpha);
  if (backward.empty() || forward.empty()) throw std::invalid_argument("certificate needs backward and forward samples");
  CertificateReport rep;
  rep.kind = "pac_reference_flow";
  rep.alpha = alpha;
  rep.confidence = 1.0 - 2.0 * alpha;
  rep.m = backward.size();
  rep.n = forward.size();
  return rep;
}

}  // namespace

CertificateReport certificate_at(double c, std::span<const FlowSample> backward, std::span<const FlowSample> forward,
                                 double alpha) {
  const auto t0 = std::chrono::steady_clock::now();
  CertificateReport rep = base_report(backward, forward, alpha);
  rep.c_lo = rep.c_hi = c;
  fill_at(rep, c, backward, forward);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

double certificate_objective(double c, std::span<const FlowSample> backward, std::span<const FlowSample> forward,
                             double alpha) {
  const double M = joint_max_ratio(backward, forward, c);
  const auto main = reference_main_term(c, M);
  if (!main) return kInf;
  return *main + pac_sampling_term(alpha, backward.size(), forward.size());
}

CertificateReport optimize_certificate(std::span<const FlowSample> backward, std::span<const FlowSample> forward,
                                       double alpha, const OptimizeOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  CertificateReport rep = base_report(backward, forward, alpha);
  rep.optimized = true;
  rep.c_hi = max_abs_log_ratio(backward, forward);
  rep.c_lo = feasibility_floor(backward, forward);

  auto f = [&](double c) {
    const double v = certificate_objective(c, backward, forward, alpha);
    rep.trace.emplace_back(c, v);
    return v;
  };

  double best_c = rep.c_hi;
  if (rep.c_lo < rep.c_hi) {
    const std::size_t k = std::max<std::size_t>(options.prescan_points, 3);
    std::vector<double> xs(k), fs(k);
    for (std::size_t i = 0; i < k; ++i) {
      xs[i] = rep.c_lo + (rep.c_hi - rep.c_lo) * static_cast<double>(i) / static_cast<double>(k - 1);
      fs[i] = f(xs[i]);
    }
    const std::size_t i = static_cast<std::size_t>(std::min_element(fs.begin(), fs.end()) - fs.begin());
    double a = xs[i == 0 ? 0 : i - 1];
    double b = xs[std::min(i + 1, k - 1)];
    best_c = xs[i];
    double best_f = fs[i];

    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = b - inv_phi * (b - a);
    double x2 = a + inv_phi * (b - a);
    double f1 = f(x1);
    double f2 = f(x2);
    for (std::size_t it = 0; it < options.max_iterations && (b - a) > options.tolerance; ++it) {
      if (f1 <= f2) {
        b = x2;
        x2 = x1;
        f2 = f1;
        x1 = b - inv_phi * (b - a);
        f1 = f(x1);
      } else {
        a = x1;
        x1 = x2;
        f1 = f2;
        x2 = a + inv_phi * (b - a);
        f2 = f(x2);
      }
    }
    for (const auto& [c, v] : rep.trace) {
      if (v < best_f) {
        best_f = v;
        best_c = c;
      }
    }
  }
  fill_at(rep, best_c, backward, forward);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

CertificateReport subgraph_certificate(std::span<const StateId> x_sub, std::span<const FlowSample> backward,
                                       std::span<const FlowSample> forward, double alpha, double log_z,
                                       double captured_reward, bool optimize, double c,
                                       const OptimizeOptions& options) {
  const std::unordered_set<StateId> members(x_sub.begin(), x_sub.end());
  std::vector<FlowSample> kept;
  for (const auto& s : forward) {
    if (members.contains(s.terminal)) kept.push_back(s);
  }
  CertificateReport rep;
  if (kept.empty() || backward.empty()) {
    check_alpha(alpha);
    rep.kind = "pac_reference_flow";
    rep.status = "no_forward_samples";
    rep.alpha = alpha;
    rep.confidence = 1.0 - 2.0 * alpha;
    rep.m = backward.size();
    rep.n = 0;
    rep.bound = 1.0;
    rep.raw_bound = std::numeric_limits<double>::quiet_NaN();
  } else {
    rep = optimize ? optimize_certificate(backward, kept, alpha, options) : certificate_at(c, backward, kept, alpha);
  }
  rep.scope = "subgraph";
  rep.captured_reward = captured_reward;
  rep.z_estimate = std::exp(log_z);
  return rep;
}

MonteCarloEstimate mc_delta_over_zstar(std::span<const FlowSample> samples, double c) {
  if (samples.empty()) throw std::invalid_argument("mc_delta_over_zstar: no samples");
  MonteCarloEstimate est;
  est.samples = samples.size();
  double sum = 0.0, sum_sq = 0.0;
  for (const auto& s : samples) {
    const double ld = reference_flow_log_delta(s.log_model_flow, s.log_target_flow, c);
    const double v = ld == -kInf ? 0.0 : std::exp(ld - s.log_target_flow);
    sum += v;
    sum_sq += v * v;
  }
  const double n = static_cast<double>(samples.size());
  est.mean = sum / n;
  if (samples.size() > 1) {
    const double var = std::max(0.0, (sum_sq - n * est.mean * est.mean) / (n - 1.0));
    est.standard_error = std::sqrt(var / n);
  }
  return est;
}

// --------------------------------------------------- incremental coverage

ContrastSummary contrast_summary(std::span<const double> reward, std::span<const double> added) {
  if (reward.size() != added.size()) throw std::invalid_argument("contrast_summary: size mismatch");
  ContrastSummary s;
  for (std::size_t i = 0; i < reward.size(); ++i) {
    if (!(reward[i] > 0.0) || added[i] < 0.0) throw std::invalid_argument("contrast_summary: need R > 0, R' >= 0");
    s.z_prev += reward[i];
    s.z_new += reward[i] + added[i];
    if (added[i] > 0.0) {
      s.z_sub_prev += reward[i];
      s.min_singleton = std::min(s.min_singleton, reward[i] / (reward[i] + added[i]));
    }
  }
  s.lambda_x = s.z_prev / s.z_new;
  return s;
}

Sandwich incremental_tv_sandwich(std::span<const double> reward, std::span<const double> added) {
  const ContrastSummary s = contrast_summary(reward, added);
  Sandwich out;
  out.upper = 1.0 - s.lambda_x;
  out.lower = (s.z_prev - s.z_sub_prev) / s.z_prev * (1.0 - s.lambda_x);
  double l1 = 0.0;
  for (std::size_t i = 0; i < reward.size(); ++i) l1 += std::abs(reward[i] / s.z_prev - (reward[i] + added[i]) / s.z_new);
  out.exact = 0.5 * l1;
  return out;
}

double loss_supremum(std::span<const double> reward, std::span<const double> added) {
  const double l = std::log(contrast_summary(reward, added).min_singleton);
  return l * l;
}

// --------------------------------------------------------- target sampling

TargetSampler::TargetSampler(std::vector<StateId> support, std::vector<double> weights)
    : support_(std::move(support)) {
  if (support_.size() != weights.size() || support_.empty())
    throw std::invalid_argument("TargetSampler: support and weights must be nonempty and aligned");
  std::vector<std::size_t> order(support_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return support_[a] < support_[b]; });
  std::vector<StateId> sorted;
  for (std::size_t i : order) {
    if (!(weights[i] > 0.0)) throw std::invalid_argument("TargetSampler: weights must be positive");
    sorted.push_back(support_[i]);
    total_ += weights[i];
    cumulative_.push_back(total_);
  }
  support_ = std::move(sorted);
}

TargetSampler TargetSampler::from_env(const DagEnv& env, std::size_t cap) {
  std::vector<StateId> s;
  std::vector<double> w;
  for (const auto& t : enumerate_terminating(env, cap)) {
    s.push_back(t.state);
    w.push_back(t.reward);
  }
  return TargetSampler(std::move(s), std::move(w));
}

StateId TargetSampler::operator()(Rng& rng) const {
  const double u = uniform01(rng) * total_;
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  if (it == cumulative_.end()) --it;
  return support_[static_cast<std::size_t>(it - cumulative_.begin())];
}

std::vector<StateId> TargetSampler::sample(Rng& rng, std::size_t count) const {
  std::vector<StateId> out(count);
  for (auto& x : out) x = (*this)(rng);
  return out;
}

std::vector<Trajectory> sample_target_trajectories(const PolicyModel& model, const DagEnv& env,
                                                   const TargetSampler& sampler, Rng& rng, std::size_t count) {
  const auto xs = sampler.sample(rng, count);
  return sample_backward_batch(model, env, xs, rng);
}

}  // namespace sgfn
