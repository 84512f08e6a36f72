#include "sgfn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace sgfn {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double log_add_exp(double a, double b) {
  if (a == kInf || b == kInf) return kInf;
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::size_t edge_index(std::span<const Edge> edges, StateId target) {
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (edges[i].state == target) return i;
  }
  throw std::invalid_argument("trajectory contains an invalid edge");
}

void check_trajectory(const DagEnv& env, std::span<const StateId> states) {
  if (states.size() < 3 || states.front() != env.initial_state() || states.back() != env.sink())
    throw std::invalid_argument("trajectory must run from s0 to sf through a terminating state");
  if (!env.is_terminating(states[states.size() - 2]))
    throw std::invalid_argument("trajectory does not end in a terminating state");
}

std::span<double> head_grad(const PolicyModel& model, std::span<double> grad, const std::string& name) {
  const auto& info = model.params.slice_info(name);
  return grad.subspan(info.offset, info.size);
}

}  // namespace

std::string to_string(Objective o) {
  switch (o) {
    case Objective::tb: return "tb";
    case Objective::db: return "db";
    case Objective::fm: return "fm";
    case Objective::subtb: return "subtb";
    case Objective::wdb: return "wdb";
  }
  return "?";
}

Objective objective_from_string(const std::string& s) {
  if (s == "tb") return Objective::tb;
  if (s == "db") return Objective::db;
  if (s == "fm") return Objective::fm;
  if (s == "subtb") return Objective::subtb;
  if (s == "wdb") return Objective::wdb;
  throw std::invalid_argument("unknown objective: " + s);
}

bool objective_needs_flow_head(Objective o) {
  return o == Objective::db || o == Objective::subtb || o == Objective::wdb;
}

double tb_loss(double log_z, double log_pf, double log_reward, double log_pb) {
  const double r = log_z + log_pf - log_reward - log_pb;
  return r * r;
}

double tb_loss(const Trajectory& tau, double log_z) {
  if (!(tau.reward > 0.0)) throw std::invalid_argument("tb_loss: reward must be positive");
  return tb_loss(log_z, tau.log_pf, std::log(tau.reward), tau.log_pb);
}

double db_loss(double log_flow_from, double log_pf, double log_flow_to, double log_pb) {
  const double r = log_flow_from + log_pf - log_flow_to - log_pb;
  return r * r;
}

double fm_loss(double log_inflow, double log_outflow) {
  const double r = log_inflow - log_outflow;
  return r * r;
}

std::vector<double> wdb_weights(const DagEnv& env, std::span<const StateId> states) {
  check_trajectory(env, states);
  const std::size_t edges = states.size() - 1;
  std::vector<double> w(edges);
  double total = 0.0;
  for (std::size_t t = 0; t < edges; ++t) {
    const StateId next = states[t + 1];
    const std::size_t reach = next == env.sink() ? 1 : env.reachable_terminals(next);
    if (reach == 0) throw std::logic_error("wdb_weights: edge reaches no terminating state");
    w[t] = 1.0 / static_cast<double>(reach);
    total += w[t];
  }
  for (double& x : w) x /= total;
  return w;
}

double reference_flow_log_delta(double log_model_flow, double log_target_flow, double c) {
  if (!(c >= 0.0)) throw std::invalid_argument("reference flow threshold must be nonnegative");
  const double r = log_model_flow - log_target_flow;
  if (std::abs(r) <= c) return -kInf;
  if (c == 0.0) return kInf;
  const double denom = std::log(std::expm1(c));
  if (r > c) return log_target_flow + c + std::log(std::expm1(r - c)) - denom;
  return log_model_flow + c + std::log(std::expm1(-r - c)) - denom;
}

double reference_flow_delta(double log_model_flow, double log_target_flow, double c) {
  return std::exp(reference_flow_log_delta(log_model_flow, log_target_flow, c));
}

double augmented_log_ratio(double log_model_flow, double log_target_flow, double log_delta) {
  if (log_delta == kInf) return 0.0;
  return log_add_exp(log_model_flow, log_delta) - log_add_exp(log_target_flow, log_delta);
}

double augmented_loss(double log_model_flow, double log_target_flow, double delta) {
  if (!(delta >= 0.0)) throw std::invalid_argument("augmented_loss: delta must be nonnegative");
  const double a = augmented_log_ratio(log_model_flow, log_target_flow, std::log(delta));
  return a * a;
}

double reduction_factor_gamma(double log_model_flow, double log_target_flow, double delta) {
  const double r = log_model_flow - log_target_flow;
  if (r == 0.0) throw std::domain_error("reduction factor undefined for a balanced trajectory");
  const double aug = augmented_loss(log_model_flow, log_target_flow, delta);
  if (aug == 0.0) return kInf;
  return std::sqrt(r * r / aug);
}

double max_to_rest_ratio(std::span<const double> losses) {
  if (losses.empty()) return kInf;
  const auto it = std::max_element(losses.begin(), losses.end());
  double rest = 0.0;
  for (auto j = losses.begin(); j != losses.end(); ++j) {
    if (j != it) rest += *j;
  }
  return rest > 0.0 ? *it / rest : kInf;
}

std::vector<double> LossBatchReport::log_ratios() const {
  std::vector<double> out(log_model_flow.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = log_model_flow[i] - log_target_flow[i];
  return out;
}

// ------------------------------------------------------------ per-object terms

TrajectoryTerms trajectory_terms(const PolicyModel& model, const DagEnv& env, std::span<const StateId> states) {
  check_trajectory(env, states);
  const std::size_t n = states.size() - 2;
  TrajectoryTerms out;
  out.log_pf.resize(n);
  out.log_pb.resize(n);
  out.log_flow.resize(n + 1);
  HeadBatch fwd, bwd, flow;
  std::vector<std::vector<Edge>> kids(n), pars(n);
  for (std::size_t t = 0; t < n; ++t) {
    kids[t] = env.children(states[t]);
    pars[t] = env.parents(states[t + 1]);
    if (kids[t].size() > 1) fwd.request(states[t]);
    if (model.backward_head && pars[t].size() > 1) bwd.request(states[t + 1]);
    if (t > 0 && model.flow_head) flow.request(states[t]);
  }
  fwd.evaluate(*model.forward_head, model.params.slice("forward"), env);
  if (model.backward_head) bwd.evaluate(*model.backward_head, model.params.slice("backward"), env);
  if (model.flow_head) flow.evaluate(*model.flow_head, model.params.slice("flow"), env);
  for (std::size_t t = 0; t < n; ++t) {
    out.log_pf[t] = kids[t].size() > 1
                        ? masked_log_softmax(fwd.output(states[t]), kids[t], edge_index(kids[t], states[t + 1]), {})
                        : 0.0;
    if (pars[t].size() <= 1) {
      out.log_pb[t] = 0.0;
    } else if (model.backward_head) {
      out.log_pb[t] = masked_log_softmax(bwd.output(states[t + 1]), pars[t], edge_index(pars[t], states[t]), {});
    } else {
      out.log_pb[t] = -std::log(static_cast<double>(pars[t].size()));
    }
  }
  out.log_flow[0] = model.log_z();
  out.log_flow[n] = std::log(env.reward(states[n]));
  for (std::size_t t = 1; t < n; ++t) {
    out.log_flow[t] = model.flow_head ? flow.output(states[t])(0) : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

namespace {

/// log inflow and log outflow at s, with edge-flow logits taken from `fwd`.
struct FmTerms {
  double log_in;
  double log_out;
};

FmTerms fm_terms(const DagEnv& env, const HeadBatch& fwd, StateId s) {
  double log_in = -kInf;
  for (const Edge& p : env.parents(s)) {
    const auto kids = env.children(p.state);
    const std::size_t k = edge_index(kids, s);
    log_in = log_add_exp(log_in, fwd.output(p.state)(kids[k].slot));
  }
  double log_out = -kInf;
  if (env.is_terminating(s)) {
    log_out = std::log(env.reward(s));
  } else {
    for (const Edge& c : env.children(s)) log_out = log_add_exp(log_out, fwd.output(s)(c.slot));
  }
  return {log_in, log_out};
}

void request_fm(const DagEnv& env, HeadBatch& fwd, StateId s) {
  for (const Edge& p : env.parents(s)) fwd.request(p.state);
  if (!env.is_terminating(s)) fwd.request(s);
}

/// Adds coeff * d(log_in - log_out)/d(logits) into the forward upstream.
void fm_backprop(const DagEnv& env, HeadBatch& fwd, StateId s, const FmTerms& terms, double coeff) {
  for (const Edge& p : env.parents(s)) {
    const auto kids = env.children(p.state);
    const std::uint32_t slot = kids[edge_index(kids, s)].slot;
    fwd.upstream(p.state)(slot) += coeff * std::exp(fwd.output(p.state)(slot) - terms.log_in);
  }
  if (!env.is_terminating(s)) {
    for (const Edge& c : env.children(s)) {
      fwd.upstream(s)(c.slot) -= coeff * std::exp(fwd.output(s)(c.slot) - terms.log_out);
    }
  }
}

void policy_backprop(HeadBatch& head, StateId s, std::span<const Edge> edges, std::size_t chosen, double coeff,
                     std::vector<double>& probs) {
  probs.assign(edges.size(), 0.0);
  masked_log_softmax(head.output(s), edges, chosen, probs);
  auto up = head.upstream(s);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    up(edges[i].slot) += coeff * ((i == chosen ? 1.0 : 0.0) - probs[i]);
  }
}

}  // namespace

double fm_state_loss(const PolicyModel& model, const DagEnv& env, StateId s) {
  if (s == env.initial_state() || s == env.sink()) throw std::invalid_argument("fm_state_loss: s0 and sf excluded");
  HeadBatch fwd;
  request_fm(env, fwd, s);
  fwd.evaluate(*model.forward_head, model.params.slice("forward"), env);
  const FmTerms t = fm_terms(env, fwd, s);
  return fm_loss(t.log_in, t.log_out);
}

// ------------------------------------------------------------------ batches

LossBatchReport evaluate_objective(const PolicyModel& model, const DagEnv& env, std::span<const Trajectory> batch,
                                   const LossOptions& options, std::span<double> grad) {
  if (batch.empty()) throw std::invalid_argument("evaluate_objective: empty batch");
  const Objective obj = options.objective;
  const bool stabilized = options.reference_threshold.has_value();
  if (stabilized && obj != Objective::tb) throw std::invalid_argument("reference flows apply to TB only");
  if (stabilized && !(*options.reference_threshold >= 0.0))
    throw std::invalid_argument("reference threshold must be nonnegative");
  if (objective_needs_flow_head(obj) && !model.flow_head)
    throw std::invalid_argument(to_string(obj) + " requires a state-flow head");
  if (!grad.empty() && grad.size() != model.params.size())
    throw std::invalid_argument("evaluate_objective: gradient size mismatch");
  if (!(options.subtb_lambda > 0.0)) throw std::invalid_argument("subtb lambda must be positive");

  const bool want_grad = !grad.empty();
  const std::size_t B = batch.size();
  const double scale = 1.0 / static_cast<double>(B);
  const bool use_flow = objective_needs_flow_head(obj);

  HeadBatch fwd, bwd, flow;
  std::vector<std::vector<std::vector<Edge>>> kids(B), pars(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& st = batch[b].states;
    check_trajectory(env, st);
    const std::size_t n = st.size() - 2;
    kids[b].resize(n);
    pars[b].resize(n);
    for (std::size_t t = 0; t < n; ++t) {
      kids[b][t] = env.children(st[t]);
      pars[b][t] = env.parents(st[t + 1]);
      if (kids[b][t].size() > 1) fwd.request(st[t]);
      if (model.backward_head && pars[b][t].size() > 1) bwd.request(st[t + 1]);
      if (use_flow && t > 0) flow.request(st[t]);
    }
    if (obj == Objective::fm) {
      for (std::size_t t = 1; t <= n; ++t) request_fm(env, fwd, st[t]);
    }
  }
  fwd.evaluate(*model.forward_head, model.params.slice("forward"), env);
  if (model.backward_head) bwd.evaluate(*model.backward_head, model.params.slice("backward"), env);
  if (use_flow) flow.evaluate(*model.flow_head, model.params.slice("flow"), env);

  LossBatchReport rep;
  rep.objective = obj;
  rep.stabilized = stabilized;
  rep.threshold = stabilized ? *options.reference_threshold : 0.0;
  rep.item_losses.resize(B);
  rep.tb_losses.resize(B);
  rep.log_model_flow.resize(B);
  rep.log_target_flow.resize(B);
  rep.log_deltas.assign(B, -kInf);

  const double log_z = model.log_z();
  double log_z_grad = 0.0;
  std::vector<double> lpf, lpb, lf, probs;
  std::vector<double> d_lpf, d_lpb, d_lf;
  std::size_t active = 0;
  double delta_sum = 0.0;

  for (std::size_t b = 0; b < B; ++b) {
    const auto& st = batch[b].states;
    const std::size_t n = st.size() - 2;
    lpf.assign(n, 0.0);
    lpb.assign(n, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      const auto& k = kids[b][t];
      if (k.size() > 1) lpf[t] = masked_log_softmax(fwd.output(st[t]), k, edge_index(k, st[t + 1]), {});
      const auto& p = pars[b][t];
      if (p.size() > 1) {
        lpb[t] = model.backward_head ? masked_log_softmax(bwd.output(st[t + 1]), p, edge_index(p, st[t]), {})
                                     : -std::log(static_cast<double>(p.size()));
      }
    }
    const double log_r = std::log(env.reward(st[n]));
    double sum_pf = 0.0, sum_pb = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      sum_pf += lpf[t];
      sum_pb += lpb[t];
    }
    const double lm = log_z + sum_pf;
    const double lt = log_r + sum_pb;
    rep.log_model_flow[b] = lm;
    rep.log_target_flow[b] = lt;
    rep.tb_losses[b] = (lm - lt) * (lm - lt);

    // Upstream derivatives of this item's loss w.r.t. the per-edge log
    // probabilities and the log flows lf[0..n].
    d_lpf.assign(n, 0.0);
    d_lpb.assign(n, 0.0);
    d_lf.assign(n + 1, 0.0);
    double item = 0.0;

    if (obj == Objective::tb) {
      double g_m = 0.0, g_t = 0.0;
      if (stabilized) {
        const double ld = options.fixed_log_deltas.empty()
                              ? reference_flow_log_delta(lm, lt, *options.reference_threshold)
                              : options.fixed_log_deltas.at(b);
        rep.log_deltas[b] = ld;
        if (ld > -kInf) {
          ++active;
          delta_sum += std::exp(ld);
        }
        const double a = augmented_log_ratio(lm, lt, ld);
        item = a * a;
        if (ld != kInf) {
          g_m = 2.0 * a * (ld == -kInf ? 1.0 : sigmoid(lm - ld));
          g_t = -2.0 * a * (ld == -kInf ? 1.0 : sigmoid(lt - ld));
        }
      } else {
        item = rep.tb_losses[b];
        g_m = 2.0 * (lm - lt);
        g_t = -g_m;
      }
      for (std::size_t t = 0; t < n; ++t) {
        d_lpf[t] = g_m;
        d_lpb[t] = g_t;
      }
      d_lf[0] = g_m;
    } else if (obj == Objective::fm) {
      const double inv = 1.0 / static_cast<double>(n);
      for (std::size_t t = 1; t <= n; ++t) {
        const FmTerms terms = fm_terms(env, fwd, st[t]);
        const double r = terms.log_in - terms.log_out;
        item += r * r * inv;
        if (want_grad) fm_backprop(env, fwd, st[t], terms, 2.0 * r * inv * scale);
      }
    } else {
      lf.assign(n + 1, 0.0);
      lf[0] = log_z;
      lf[n] = log_r;
      for (std::size_t t = 1; t < n; ++t) lf[t] = flow.output(st[t])(0);

      if (obj == Objective::db || obj == Objective::wdb) {
        std::vector<double> w;
        if (obj == Objective::wdb) {
          w = wdb_weights(env, st);
        } else {
          w.assign(n, 1.0 / static_cast<double>(n));
        }
        for (std::size_t t = 0; t < n; ++t) {
          const double r = lf[t] + lpf[t] - lf[t + 1] - lpb[t];
          item += w[t] * r * r;
          const double g = 2.0 * w[t] * r;
          d_lf[t] += g;
          d_lf[t + 1] -= g;
          d_lpf[t] += g;
          d_lpb[t] -= g;
        }
      } else {
        // Sub-trajectory balance over every span i < j with weight lambda^(j-i).
        std::vector<double> P(n + 1, 0.0), Q(n + 1, 0.0);
        for (std::size_t t = 0; t < n; ++t) {
          P[t + 1] = P[t] + lpf[t];
          Q[t + 1] = Q[t] + lpb[t];
        }
        double wsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = i + 1; j <= n; ++j) wsum += std::pow(options.subtb_lambda, static_cast<double>(j - i));
        }
        std::vector<double> diff_pf(n + 1, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = i + 1; j <= n; ++j) {
            const double w = std::pow(options.subtb_lambda, static_cast<double>(j - i)) / wsum;
            const double r = lf[i] + (P[j] - P[i]) - lf[j] - (Q[j] - Q[i]);
            item += w * r * r;
            const double g = 2.0 * w * r;
            d_lf[i] += g;
            d_lf[j] -= g;
            diff_pf[i] += g;
            diff_pf[j] -= g;
          }
        }
        double run = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
          run += diff_pf[t];
          d_lpf[t] = run;
          d_lpb[t] = -run;
        }
      }
    }
    rep.item_losses[b] = item;

    if (!want_grad || obj == Objective::fm) continue;
    for (std::size_t t = 0; t < n; ++t) {
      if (d_lpf[t] != 0.0 && kids[b][t].size() > 1) {
        const auto& k = kids[b][t];
        policy_backprop(fwd, st[t], k, edge_index(k, st[t + 1]), d_lpf[t] * scale, probs);
      }
      if (d_lpb[t] != 0.0 && model.backward_head && pars[b][t].size() > 1) {
        const auto& p = pars[b][t];
        policy_backprop(bwd, st[t + 1], p, edge_index(p, st[t]), d_lpb[t] * scale, probs);
      }
    }
    log_z_grad += d_lf[0] * scale;
    if (use_flow) {
      for (std::size_t t = 1; t < n; ++t) flow.upstream(st[t])(0) += d_lf[t] * scale;
    }
  }

  if (want_grad) {
    fwd.backprop(*model.forward_head, model.params.slice("forward"), env, head_grad(model, grad, "forward"));
    if (model.backward_head)
      bwd.backprop(*model.backward_head, model.params.slice("backward"), env, head_grad(model, grad, "backward"));
    if (use_flow) flow.backprop(*model.flow_head, model.params.slice("flow"), env, head_grad(model, grad, "flow"));
    head_grad(model, grad, "log_z")[0] += log_z_grad;
  }

  rep.mean = std::accumulate(rep.item_losses.begin(), rep.item_losses.end(), 0.0) * scale;
  rep.max = *std::max_element(rep.item_losses.begin(), rep.item_losses.end());
  rep.max_to_rest = max_to_rest_ratio(rep.item_losses);
  rep.active_delta_fraction = static_cast<double>(active) * scale;
  rep.mean_delta = delta_sum * scale;
  return rep;
}

}  // namespace sgfn
