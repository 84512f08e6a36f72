#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sgfn/approximator.hpp"

namespace sgfn {

/// Adaptive moment estimation with a learning rate per named parameter slice.
class AdamOptimizer {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  AdamOptimizer() = default;
  AdamOptimizer(const ParamVector& params, double learning_rate, Options options);
  AdamOptimizer(const ParamVector& params, double learning_rate) : AdamOptimizer(params, learning_rate, Options{}) {}

  void set_learning_rate(const std::string& slice, double lr);
  double learning_rate(const std::string& slice) const;

  /// One bias-corrected step. Throws (leaving params untouched) if the
  /// result would contain a non-finite value.
  void step(ParamVector& params, std::span<const double> grad);

  std::uint64_t step_count() const { return step_; }
  const Options& options() const { return options_; }
  const std::vector<double>& first_moment() const { return m_; }
  const std::vector<double>& second_moment() const { return v_; }
  const std::map<std::string, double>& learning_rates() const { return lr_; }

  /// Restores the full state (used by checkpoint loading).
  void restore(std::uint64_t step, std::vector<double> m, std::vector<double> v, std::map<std::string, double> lr,
               Options options);

 private:
  Options options_{};
  std::map<std::string, double> lr_;
  std::vector<double> per_param_lr_;
  std::vector<ParamVector::Slice> layout_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::uint64_t step_ = 0;

  void rebuild_lr_table();
};

double l2_norm(std::span<const double> g);

/// Rescales g in place to norm max_norm if its norm exceeds it. Returns the
/// norm before clipping. Throws on non-finite input.
double clip_grad_norm(std::span<double> g, double max_norm = 10.0);

/// Scalar function of a flat parameter vector. When grad is non-empty it is
/// overwritten with the analytic gradient.
using LossWithGradient = std::function<double(std::span<const double> params, std::span<double> grad)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares the analytic gradient with central differences (step 1e-5) on
/// up to max_params randomly chosen coordinates. Relative error is
/// |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(std::span<const double> params, const LossWithGradient& loss, std::size_t max_params,
                           std::uint64_t seed, double step = 1e-5, double floor = 1e-6);

}  // namespace sgfn
