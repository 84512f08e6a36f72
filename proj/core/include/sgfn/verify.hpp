#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace sgfn {

/// Bound functions used by the property suites. Replacing one lets a test
/// confirm that the corresponding suite notices a broken implementation.
struct VerifyHooks {
  std::function<double(double c)> loss_to_tv;
  std::function<std::optional<double>(double c, double max_delta_ratio)> reference_main;
  std::function<double(double c, std::size_t m, std::size_t n, double alpha)> pac_raw;
  std::function<double(double log_model_flow, double log_target_flow, double c)> log_delta;

  /// Hooks bound to the library implementations.
  static VerifyHooks defaults();
};

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// Individual checks, parameterized so callers can pin instance counts.

/// Augmented loss with the minimal reference flow never exceeds c^2, hits it
/// whenever delta > 0, and delta vanishes exactly when |log ratio| <= c.
SuiteResult check_delta_cap(std::size_t draws, std::uint64_t seed, const VerifyHooks& hooks);

/// Exact TV never exceeds the loss-derived bound on random tabular policies.
SuiteResult check_tv_soundness(std::size_t policies, std::uint64_t seed, const VerifyHooks& hooks);

/// Optimized sampling certificates fall below the exact TV no more often
/// than 2 alpha plus a binomial 99% allowance.
SuiteResult check_pac_coverage(std::size_t trials, double alpha, std::uint64_t seed);

/// Reference-flow main term is nondecreasing in M and c on a grid, and with
/// M = 0 the reference bound equals the plain sampling bound exactly.
SuiteResult check_bound_monotone(std::size_t grid, const VerifyHooks& hooks);

/// Incremental-reward sandwich on random instances, plus the loss supremum
/// against the largest enumerated loss of the converged previous model.
SuiteResult check_sandwich(std::size_t instances, std::uint64_t seed);

/// Monte-Carlo Delta/Z* estimate against exact enumeration.
SuiteResult check_mc_fidelity(std::size_t samples, double tolerance, std::uint64_t seed);

/// Analytic gradients of every objective through an MLP versus central differences.
SuiteResult check_gradients(std::size_t instances, double tolerance, std::uint64_t seed);

/// Converged previous-reward model evaluated under the promoted reward: only
/// objects touching the promoted leaf have loss, and it equals (ln eps)^2.
SuiteResult check_one_more_mode_losses(std::size_t branching, std::size_t depth, double epsilon);

/// Closed-form one-more-mode TV against enumeration over a parameter grid.
SuiteResult check_one_more_mode_tv(double tolerance);

/// Balanced tabular models have zero loss under every objective.
SuiteResult check_balanced_zero_loss(std::uint64_t seed);

/// State and edge flows equal sums of trajectory flows.
SuiteResult check_flow_identities(std::uint64_t seed);

struct SuiteInfo {
  std::string name;
  std::string description;
  std::function<SuiteResult(const VerifyHooks&, std::uint64_t seed)> run;
};

/// Registered suites with their default sizes.
const std::vector<SuiteInfo>& verify_suites();

/// Runs every suite whose name is in `only` (all when empty). Throws
/// std::invalid_argument for an unknown name.
std::vector<SuiteResult> run_verify(const std::vector<std::string>& only, const VerifyHooks& hooks,
                                    std::uint64_t seed = 0);

/// Smallest k with P(Binomial(n, p) <= k) >= q.
std::size_t binomial_quantile(std::size_t n, double p, double q);

}  // namespace sgfn
