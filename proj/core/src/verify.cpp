#include "sgfn/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "sgfn/certify.hpp"
#include "sgfn/env.hpp"
#include "sgfn/losses.hpp"
#include "sgfn/optimizer.hpp"
#include "sgfn/oracle.hpp"
#include "sgfn/policy.hpp"
#include "sgfn/rng.hpp"

namespace sgfn {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

std::size_t below(Rng& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

template <typename Body>
SuiteResult timed(const std::string& name, Body&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = name;
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::shared_ptr<const DagEnv> random_tree(Rng& rng, std::size_t g, std::size_t h, double lo = 0.1, double hi = 2.0) {
  std::size_t leaves = 1;
  for (std::size_t i = 0; i < h; ++i) leaves *= g;
  std::vector<double> r(leaves);
  for (double& x : r) x = uniform(rng, lo, hi);
  return std::make_shared<RegularTree>(g, h, std::move(r));
}

/// Small enumerable environments used across suites.
std::shared_ptr<const DagEnv> small_env(Rng& rng, std::size_t index) {
  switch (index % 6) {
    case 0: return random_tree(rng, 2, 1);
    case 1: return random_tree(rng, 2, 2);
    case 2: return random_tree(rng, 3, 2);
    case 3: return random_tree(rng, 2, 3);
    case 4: return std::make_shared<Hypergrid>(2, 3, 0.1, 0.5, 2.0);
    default: return std::make_shared<Hypergrid>(2, 4, 0.1, 0.5, 2.0);
  }
}

std::vector<Trajectory> as_trajectories(const DagEnv& env, const std::vector<std::vector<StateId>>& paths) {
  std::vector<Trajectory> out;
  out.reserve(paths.size());
  for (const auto& p : paths) {
    Trajectory t;
    t.states = p;
    t.reward = env.reward(t.terminal());
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

VerifyHooks VerifyHooks::defaults() {
  VerifyHooks h;
  h.loss_to_tv = [](double c) { return tv_bound_from_loss(c, LossScope::trajectory); };
  h.reference_main = [](double c, double M) { return reference_main_term(c, M); };
  h.pac_raw = [](double c, std::size_t m, std::size_t n, double a) { return pac_tv_bound_raw(c, m, n, a); };
  h.log_delta = [](double lm, double lt, double c) { return reference_flow_log_delta(lm, lt, c); };
  return h;
}

std::size_t binomial_quantile(std::size_t n, double p, double q) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("binomial_quantile: p must lie in [0, 1]");
  if (p == 0.0) return 0;
  if (p == 1.0) return n;
  double cdf = 0.0;
  const double nn = static_cast<double>(n);
  for (std::size_t k = 0; k <= n; ++k) {
    const double kk = static_cast<double>(k);
    const double log_pmf = std::lgamma(nn + 1.0) - std::lgamma(kk + 1.0) - std::lgamma(nn - kk + 1.0) +
                           kk * std::log(p) + (nn - kk) * std::log1p(-p);
    cdf += std::exp(log_pmf);
    if (cdf >= q) return k;
  }
  return n;
}

SuiteResult check_delta_cap(std::size_t draws, std::uint64_t seed, const VerifyHooks& hooks) {
  return timed("delta_cap", [&](SuiteResult& r) {
    Rng rng = make_rng(seed, "delta_cap");
    std::size_t over = 0, missed_equality = 0, zero_mismatch = 0, active = 0;
    double worst_excess = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
      const double lm = uniform(rng, -10.0, 10.0);
      const double lt = uniform(rng, -10.0, 10.0);
      const double c = i % 10 == 0 ? std::abs(lm - lt) * uniform(rng, 0.5, 1.5) : uniform(rng, 0.0, 3.0);
      const double ld = hooks.log_delta(lm, lt, c);
      const double a = augmented_log_ratio(lm, lt, ld);
      const double loss = a * a;
      const double excess = loss - c * c;
      worst_excess = std::max(worst_excess, excess);
      if (excess > 1e-9) ++over;
      const bool positive = ld > -kInf;
      if (positive) {
        ++active;
        if (std::abs(excess) > 1e-9) ++missed_equality;
      }
      if (positive != (std::abs(lm - lt) > c)) ++zero_mismatch;
    }
    std::ostringstream os;
    os << draws << " draws, " << active << " with delta > 0; over cap " << over << ", equality misses "
       << missed_equality << ", zero-set mismatches " << zero_mismatch << ", worst excess " << worst_excess;
    r.detail = os.str();
    r.passed = over == 0 && missed_equality == 0 && zero_mismatch == 0;
  });
}

SuiteResult check_tv_soundness(std::size_t policies, std::uint64_t seed, const VerifyHooks& hooks) {
  return timed("tv_sound", [&](SuiteResult& r) {
    Rng rng = make_rng(seed, "tv_sound");
    const double noise_levels[] = {0.005, 0.02, 0.1, 0.5, 2.0};
    std::size_t violations = 0, informative = 0;
    double worst_gap = -kInf;
    for (std::size_t i = 0; i < policies; ++i) {
      const auto env = small_env(rng, i);
      PolicyModel model = perturbed_balanced_model(*env, rng, noise_levels[(i / 6) % 5]);
      model.set_log_z(model.log_z() + uniform(rng, -0.05, 0.05));
      const double c = std::sqrt(max_trajectory_tb_loss(model, *env));
      const double bound = hooks.loss_to_tv(c);
      const double tv = exact_tv(model, *env);
      if (bound < 1.0) ++informative;
      worst_gap = std::max(worst_gap, tv - bound);
      if (tv > bound + 1e-12) ++violations;
    }
    std::ostringstream os;
    os << policies << " policies (" << informative << " with bound < 1), violations " << violations
       << ", max(tv - bound) " << worst_gap;
    r.detail = os.str();
    r.passed = violations == 0;
  });
}

SuiteResult check_pac_coverage(std::size_t trials, double alpha, std::uint64_t seed) {
  return timed("pac_coverage", [&](SuiteResult& r) {
    const std::size_t m = 200, n = 200;
    std::size_t violations = 0, informative = 0;
    std::vector<std::shared_ptr<const DagEnv>> envs;
    {
      Rng env_rng = make_rng(seed, "pac_envs");
      envs.push_back(random_tree(env_rng, 3, 2));
      envs.push_back(std::make_shared<Hypergrid>(2, 3, 0.1, 0.5, 2.0));
      envs.push_back(random_tree(env_rng, 2, 3));
    }
    std::vector<TargetSampler> samplers;
    for (const auto& e : envs) samplers.push_back(TargetSampler::from_env(*e));
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng = make_rng(seed, "pac_trial", t);
      const std::size_t k = t % envs.size();
      const DagEnv& env = *envs[k];
      PolicyModel model = perturbed_balanced_model(env, rng, uniform(rng, 0.01, 0.4));
      const double tv = exact_tv(model, env);
      const auto back = sample_target_trajectories(model, env, samplers[k], rng, m);
      const auto fwd = sample_forward_batch(model, env, rng, n, 0.0);
      const auto cert = optimize_certificate(flow_samples(back, model.log_z()), flow_samples(fwd, model.log_z()), alpha);
      if (cert.bound < 1.0) ++informative;
      if (cert.bound < tv) ++violations;
    }
    const std::size_t allowed = binomial_quantile(trials, 2.0 * alpha, 0.99);
    std::ostringstream os;
    os << trials << " trials (" << informative << " with bound < 1), violations " << violations << ", allowed "
       << allowed;
    r.detail = os.str();
    r.passed = violations <= allowed;
  });
}

SuiteResult check_bound_monotone(std::size_t grid, const VerifyHooks& hooks) {
  return timed("bound_monotone", [&](SuiteResult& r) {
    std::vector<double> cs(grid), ms(grid);
    for (std::size_t i = 0; i < grid; ++i) {
      cs[i] = static_cast<double>(i) / static_cast<double>(grid - 1);
      ms[i] = 4.0 * static_cast<double>(i) / static_cast<double>(grid - 1);
    }
    std::vector<std::vector<std::optional<double>>> v(grid, std::vector<std::optional<double>>(grid));
    for (std::size_t i = 0; i < grid; ++i) {
      for (std::size_t j = 0; j < grid; ++j) v[i][j] = hooks.reference_main(cs[i], ms[j]);
    }
    std::size_t breaks = 0, compared = 0;
    for (std::size_t i = 0; i < grid; ++i) {
      for (std::size_t j = 0; j < grid; ++j) {
        if (!v[i][j]) continue;
        if (j + 1 < grid && v[i][j + 1]) {
          ++compared;
          if (*v[i][j + 1] < *v[i][j] - 1e-14) ++breaks;
        }
        if (i + 1 < grid && v[i + 1][j]) {
          ++compared;
          if (*v[i + 1][j] < *v[i][j] - 1e-14) ++breaks;
        }
      }
    }
    std::size_t reduction_misses = 0;
    const double alpha = 0.05;
    for (double c : cs) {
      for (std::size_t mm : {std::size_t{10}, std::size_t{100}, std::size_t{1000}}) {
        const auto main = hooks.reference_main(c, 0.0);
        const double plain = hooks.pac_raw(c, mm, 2 * mm, alpha);
        if (!main || *main + pac_sampling_term(alpha, mm, 2 * mm) != plain) ++reduction_misses;
      }
    }
    std::ostringstream os;
    os << compared << " neighbour comparisons, monotonicity breaks " << breaks << ", M=0 reduction misses "
       << reduction_misses;
    r.detail = os.str();
    r.passed = compared > 0 && breaks == 0 && reduction_misses == 0;
  });
}

SuiteResult check_sandwich(std::size_t instances, std::uint64_t seed) {
  return timed("sandwich", [&](SuiteResult& r) {
    Rng rng = make_rng(seed, "sandwich");
    std::size_t failures = 0;
    for (std::size_t i = 0; i < instances; ++i) {
      const std::size_t k = 2 + below(rng, 29);
      std::vector<double> reward(k), added(k, 0.0);
      for (double& x : reward) x = uniform(rng, 0.1, 2.0);
      const double p = uniform(rng, 0.05, 1.0);
      for (std::size_t j = 0; j < k; ++j) {
        if (uniform01(rng) < p) added[j] = uniform(rng, 0.01, 3.0);
      }
      if (i % 10 == 0) {
        for (std::size_t j = 0; j < k; ++j) added[j] = reward[j];
      }
      added[below(rng, k)] = uniform(rng, 0.01, 3.0);
      const Sandwich s = incremental_tv_sandwich(reward, added);
      std::vector<double> updated(k);
      for (std::size_t j = 0; j < k; ++j) updated[j] = reward[j] + added[j];
      const double exact = reward_tv(reward, updated);
      if (std::abs(exact - s.exact) > 1e-12 || s.lower > exact + 1e-12 || exact > s.upper + 1e-12) ++failures;
    }

    // Loss supremum against enumeration at the converged previous model.
    std::size_t sup_failures = 0;
    double worst = 0.0;
    const std::size_t sup_instances = std::max<std::size_t>(instances / 5, 4);
    for (std::size_t i = 0; i < sup_instances; ++i) {
      std::shared_ptr<const DagEnv> prev;
      if (i % 4 == 3) {
        prev = std::make_shared<Hypergrid>(2, 3, 0.1, 0.5, 2.0);
      } else {
        prev = random_tree(rng, 2 + below(rng, 2), 1 + below(rng, 3));
      }
      const auto terms = enumerate_terminating(*prev);
      std::vector<double> reward, added;
      std::vector<std::pair<StateId, double>> extra;
      for (const auto& t : terms) {
        reward.push_back(t.reward);
        const double a = uniform01(rng) < 0.3 ? uniform(rng, 0.01, 5.0) : 0.0;
        added.push_back(a);
        if (a > 0.0) extra.emplace_back(t.state, a);
      }
      if (extra.empty()) {
        added[0] = 1.0;
        extra.emplace_back(terms[0].state, 1.0);
      }
      const auto updated = std::make_shared<OneMoreMode>(prev, extra);
      const PolicyModel model = balanced_tabular_model(*prev);
      const double enumerated = max_trajectory_tb_loss(model, *updated);
      const double sup = loss_supremum(reward, added);
      const double diff = std::abs(enumerated - sup);
      worst = std::max(worst, diff);
      if (diff > 1e-8) ++sup_failures;
    }
    std::ostringstream os;
    os << instances << " sandwich instances, failures " << failures << "; " << sup_instances
       << " supremum instances, failures " << sup_failures << ", worst gap " << worst;
    r.detail = os.str();
    r.passed = failures == 0 && sup_failures == 0;
  });
}

SuiteResult check_mc_fidelity(std::size_t samples, double tolerance, std::uint64_t seed) {
  return timed("mc_fidelity", [&](SuiteResult& r) {
    Rng rng = make_rng(seed, "mc_fidelity");
    const auto env = random_tree(rng, 3, 3, 0.5, 2.0);
    PolicyModel model = perturbed_balanced_model(*env, rng, 0.5);
    double max_ratio = 0.0;
    for (const auto& e : enumerate_trajectories(model, *env)) {
      max_ratio = std::max(max_ratio, std::abs(model.log_z() + e.tau.log_pf - std::log(e.tau.reward) - e.tau.log_pb));
    }
    const double c = 0.5 * max_ratio;
    const double exact = exact_delta_over_zstar(model, *env, c);
    const auto sampler = TargetSampler::from_env(*env);
    const auto taus = sample_target_trajectories(model, *env, sampler, rng, samples);
    const auto est = mc_delta_over_zstar(flow_samples(taus, model.log_z()), c);
    const double rel = std::abs(est.mean - exact) / exact;
    std::ostringstream os;
    os << "c " << c << ", exact " << exact << ", estimate " << est.mean << " (se " << est.standard_error
       << "), relative error " << rel;
    r.detail = os.str();
    r.passed = exact > 0.0 && rel < tolerance;
  });
}

namespace {

constexpr double kKinkMargin = 1e-4;

double kink_margin(const PolicyModel& model, const DagEnv& env) {
  std::vector<StateId> states(env.num_states());
  for (std::size_t s = 0; s < states.size(); ++s) states[s] = static_cast<StateId>(s);
  double margin = std::numeric_limits<double>::infinity();
  const std::pair<const char*, const Approximator*> heads[] = {
      {"forward", model.forward_head.get()}, {"backward", model.backward_head.get()}, {"flow", model.flow_head.get()}};
  for (const auto& [name, head] : heads) {
    const auto* mlp = dynamic_cast<const MlpApproximator*>(head);
    if (mlp == nullptr) continue;
    margin = std::min(margin, mlp->kink_margin(model.params.slice(name), env, states));
  }
  return margin;
}

}  // namespace

SuiteResult check_gradients(std::size_t instances, double tolerance, std::uint64_t seed) {
  return timed("grad_check", [&](SuiteResult& r) {
    double worst = 0.0;
    std::string worst_what;
    std::size_t checks = 0;
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng = make_rng(seed, "grad_check", i);
      std::shared_ptr<const DagEnv> env;
      if (i % 2 == 0) {
        env = random_tree(rng, 2, 2);
      } else {
        env = std::make_shared<Hypergrid>(2, 3, 0.1, 0.5, 2.0);
      }
      ModelSpec spec;
      spec.kind = "mlp";
      spec.hidden = 6;
      spec.flow_head = true;
      // Central differences are meaningless across a LeakyReLU kink, so
      // instances with a pre-activation inside the stencil are redrawn.
      PolicyModel model = PolicyModel::create(*env, spec, rng);
      for (int attempt = 0; attempt < 1000 && kink_margin(model, *env) < kKinkMargin; ++attempt)
        model = PolicyModel::create(*env, spec, rng);
      model.set_log_z(uniform(rng, -1.0, 1.0));
      const auto batch = sample_forward_batch(model, *env, rng, 4, 0.3);

      struct Case {
        std::string name;
        LossOptions options;
      };
      std::vector<Case> cases;
      for (Objective o : {Objective::tb, Objective::db, Objective::fm, Objective::subtb, Objective::wdb}) {
        LossOptions opt;
        opt.objective = o;
        cases.push_back({to_string(o), opt});
      }
      {
        const auto base = evaluate_objective(model, *env, batch, LossOptions{});
        double hi = 0.0;
        for (double x : base.log_ratios()) hi = std::max(hi, std::abs(x));
        LossOptions opt;
        opt.reference_threshold = 0.5 * hi;
        const auto rep = evaluate_objective(model, *env, batch, opt);
        opt.fixed_log_deltas = rep.log_deltas;
        cases.push_back({"augmented_tb", opt});
      }
      for (const auto& cs : cases) {
        const LossWithGradient fn = [&](std::span<const double> p, std::span<double> g) {
          PolicyModel local = model;
          std::copy(p.begin(), p.end(), local.params.values().begin());
          if (!g.empty()) std::fill(g.begin(), g.end(), 0.0);
          return evaluate_objective(local, *env, batch, cs.options, g).mean;
        };
        // At step 1e-5 the difference quotient carries about 1e-10 of rounding
        // noise, so components below 1e-5 are compared on an absolute scale.
        const auto res = grad_check(model.params.values(), fn, 60, derive_seed(seed, cs.name, i), 1e-5, 1e-5);
        ++checks;
        if (res.max_relative_error > worst) {
          worst = res.max_relative_error;
          std::ostringstream w;
          w << cs.name << " on instance " << i << ", analytic " << res.worst_analytic << " vs numeric "
            << res.worst_numeric;
          worst_what = w.str();
        }
      }
    }
    std::ostringstream os;
    os << checks << " gradient checks, worst relative error " << worst;
    if (!worst_what.empty()) os << " (" << worst_what << ")";
    r.detail = os.str();
    r.passed = worst < tolerance;
  });
}

SuiteResult check_one_more_mode_losses(std::size_t branching, std::size_t depth, double epsilon) {
  return timed("one_more_mode_losses", [&](SuiteResult& r) {
    const auto pair = one_more_mode_tree(branching, depth, epsilon);
    const PolicyModel model = balanced_tabular_model(*pair.previous);
    const DagEnv& env = *pair.promoted;
    const StateId leaf = pair.promoted_leaf;
    const double expected = std::log(epsilon) * std::log(epsilon);
    std::map<std::string, std::size_t> nonzero, bad;
    double worst_nonzero = 0.0, worst_zero = 0.0;
    auto record = [&](const std::string& kind, double loss, bool touches) {
      if (touches) {
        ++nonzero[kind];
        const double err = std::abs(loss - expected);
        worst_nonzero = std::max(worst_nonzero, err);
        if (err > 1e-8) ++bad[kind];
      } else {
        worst_zero = std::max(worst_zero, loss);
        if (loss >= 1e-10) ++bad[kind];
      }
    };
    for (const auto& path : enumerate_paths(env)) {
      const auto t = trajectory_terms(model, env, path);
      const std::size_t n = path.size() - 2;
      const bool hits = path[n] == leaf;
      double pf = 0.0, pb = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        pf += t.log_pf[k];
        pb += t.log_pb[k];
      }
      record("tb", tb_loss(t.log_flow[0], pf, t.log_flow[n], pb), hits);
      for (std::size_t k = 0; k < n; ++k) {
        record("db", db_loss(t.log_flow[k], t.log_pf[k], t.log_flow[k + 1], t.log_pb[k]), hits && k + 1 == n);
      }
      for (std::size_t i = 0; i < n; ++i) {
        double spf = 0.0, spb = 0.0;
        for (std::size_t j = i + 1; j <= n; ++j) {
          spf += t.log_pf[j - 1];
          spb += t.log_pb[j - 1];
          record("subtb", db_loss(t.log_flow[i], spf, t.log_flow[j], spb), hits && j == n);
        }
      }
    }
    for (std::size_t s = 1; s + 1 < env.num_states(); ++s) {
      const auto id = static_cast<StateId>(s);
      record("fm", fm_state_loss(model, env, id), id == leaf);
    }
    std::ostringstream os;
    os << "expected (ln eps)^2 = " << expected << "; nonzero objects:";
    bool ok = true;
    for (const char* kind : {"tb", "db", "subtb", "fm"}) {
      os << ' ' << kind << '=' << nonzero[kind];
      ok = ok && nonzero[kind] > 0 && bad[kind] == 0;
    }
    os << "; worst error on nonzero " << worst_nonzero << ", largest other loss " << worst_zero;
    r.detail = os.str();
    r.passed = ok;
  });
}

SuiteResult check_one_more_mode_tv(double tolerance) {
  return timed("one_more_mode_tv", [&](SuiteResult& r) {
    double worst = 0.0;
    std::size_t cases = 0;
    for (std::size_t g : {2, 3}) {
      for (std::size_t h : {1, 2, 3}) {
        for (double eps : {1e-3, 1e-2, 0.1, 0.5}) {
          const auto pair = one_more_mode_tree(g, h, eps);
          const PolicyModel model = balanced_tabular_model(*pair.previous);
          const double enumerated = exact_tv(model, *pair.promoted);
          worst = std::max(worst, std::abs(enumerated - one_more_mode_tv_closed_form(g, h, eps)));
          ++cases;
        }
      }
    }
    std::ostringstream os;
    os << cases << " (g, h, eps) cases, worst gap " << worst;
    r.detail = os.str();
    r.passed = worst <= tolerance;
  });
}

SuiteResult check_balanced_zero_loss(std::uint64_t seed) {
  return timed("balanced_zero_loss", [&](SuiteResult& r) {
    Rng rng = make_rng(seed, "balanced_zero_loss");
    std::vector<std::shared_ptr<const DagEnv>> envs;
    for (std::size_t i = 0; i < 6; ++i) envs.push_back(small_env(rng, i));
    envs.push_back(std::make_shared<Hypergrid>(3, 3, 0.1, 0.5, 2.0));
    envs.push_back(one_more_mode_tree(3, 2, 0.1).promoted);
    double worst = 0.0;
    for (const auto& env : envs) {
      const PolicyModel model = balanced_tabular_model(*env);
      const auto batch = as_trajectories(*env, enumerate_paths(*env));
      for (Objective o : {Objective::tb, Objective::db, Objective::fm, Objective::subtb, Objective::wdb}) {
        LossOptions opt;
        opt.objective = o;
        const auto rep = evaluate_objective(model, *env, batch, opt);
        worst = std::max(worst, rep.max);
      }
      for (std::size_t s = 1; s + 1 < env->num_states(); ++s) {
        worst = std::max(worst, fm_state_loss(model, *env, static_cast<StateId>(s)));
      }
      worst = std::max(worst, exact_tv(model, *env));
    }
    std::ostringstream os;
    os << envs.size() << " environments, largest loss or TV " << worst;
    r.detail = os.str();
    r.passed = worst < 1e-10;
  });
}

SuiteResult check_flow_identities(std::uint64_t seed) {
  return timed("flow_identities", [&](SuiteResult& r) {
    Rng rng = make_rng(seed, "flow_identities");
    double worst = 0.0;
    std::size_t envs = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      const auto env = small_env(rng, i);
      const ExactFlows f = exact_flows(*env);
      std::vector<double> state_sum(env->num_states(), 0.0);
      std::vector<std::vector<double>> edge_sum(env->num_states());
      for (std::size_t s = 0; s < env->num_states(); ++s) edge_sum[s].assign(env->children(static_cast<StateId>(s)).size(), 0.0);
      for (const auto& p : enumerate_paths(*env)) {
        const std::size_t n = p.size() - 2;
        double flow = env->reward(p[n]);
        for (std::size_t t = 0; t < n; ++t) flow /= static_cast<double>(env->parents(p[t + 1]).size());
        for (std::size_t t = 0; t + 1 < p.size(); ++t) {
          state_sum[p[t]] += flow;
          const auto kids = env->children(p[t]);
          for (std::size_t k = 0; k < kids.size(); ++k) {
            if (kids[k].state == p[t + 1]) edge_sum[p[t]][k] += flow;
          }
        }
        state_sum[p.back()] += flow;
      }
      auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };
      for (std::size_t s = 0; s < env->num_states(); ++s) {
        worst = std::max(worst, rel(state_sum[s], f.state_flow[s]));
        for (std::size_t k = 0; k < edge_sum[s].size(); ++k) worst = std::max(worst, rel(edge_sum[s][k], f.edge_flow[s][k]));
      }
      worst = std::max(worst, rel(f.state_flow[env->initial_state()], true_partition_function(*env)));
      ++envs;
    }
    std::ostringstream os;
    os << envs << " environments, worst relative mismatch " << worst;
    r.detail = os.str();
    r.passed = worst < 1e-12;
  });
}

const std::vector<SuiteInfo>& verify_suites() {
  static const std::vector<SuiteInfo> suites = {
      {"delta_cap", "reference flow caps the augmented loss at c^2",
       [](const VerifyHooks& h, std::uint64_t s) { return check_delta_cap(10000, s, h); }},
      {"tv_sound", "loss-to-TV bound holds on random tabular policies",
       [](const VerifyHooks& h, std::uint64_t s) { return check_tv_soundness(200, s, h); }},
      {"pac_coverage", "sampling certificate coverage at alpha = 0.05",
       [](const VerifyHooks&, std::uint64_t s) { return check_pac_coverage(1000, 0.05, s); }},
      {"bound_monotone", "reference bound monotone in M and c; M = 0 reduction",
       [](const VerifyHooks& h, std::uint64_t) { return check_bound_monotone(50, h); }},
      {"sandwich", "incremental-reward TV sandwich and loss supremum",
       [](const VerifyHooks&, std::uint64_t s) { return check_sandwich(100, s); }},
      {"mc_fidelity", "Monte-Carlo Delta/Z* within 5% of enumeration",
       [](const VerifyHooks&, std::uint64_t s) { return check_mc_fidelity(10000, 0.05, s); }},
      {"grad_check", "analytic gradients match central differences",
       [](const VerifyHooks&, std::uint64_t s) { return check_gradients(10, 1e-4, s); }},
      {"one_more_mode_losses", "promoted-leaf losses equal (ln eps)^2, all others vanish",
       [](const VerifyHooks&, std::uint64_t) { return check_one_more_mode_losses(3, 3, 1e-3); }},
      {"one_more_mode_tv", "closed-form one-more-mode TV matches enumeration",
       [](const VerifyHooks&, std::uint64_t) { return check_one_more_mode_tv(1e-12); }},
      {"balanced_zero_loss", "balanced models have zero loss under every objective",
       [](const VerifyHooks&, std::uint64_t s) { return check_balanced_zero_loss(s); }},
      {"flow_identities", "state and edge flows are sums of trajectory flows",
       [](const VerifyHooks&, std::uint64_t s) { return check_flow_identities(s); }},
  };
  return suites;
}

std::vector<SuiteResult> run_verify(const std::vector<std::string>& only, const VerifyHooks& hooks,
                                    std::uint64_t seed) {
  const auto& suites = verify_suites();
  for (const auto& name : only) {
    if (std::none_of(suites.begin(), suites.end(), [&](const SuiteInfo& s) { return s.name == name; }))
      throw std::invalid_argument("unknown suite: " + name);
  }
  std::vector<SuiteResult> out;
  for (const auto& s : suites) {
    if (!only.empty() && std::find(only.begin(), only.end(), s.name) == only.end()) continue;
    out.push_back(s.run(hooks, seed));
  }
  return out;
}

}  // namespace sgfn
