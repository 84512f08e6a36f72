#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sgfn/env.hpp"

namespace sgfn {

/// Policy logits and log-flows are clamped to [-kLogitClamp, kLogitClamp].
inline constexpr double kLogitClamp = 50.0;

double clamp_logit(double x);

/// Flat parameter storage with named, contiguous slices.
class ParamVector {
 public:
  struct Slice {
    std::string name;
    std::size_t offset;
    std::size_t size;
  };

  /// Appends a zero-initialized slice and returns its offset.
  std::size_t add_slice(std::string name, std::size_t size);

  bool has_slice(const std::string& name) const;
  const Slice& slice_info(const std::string& name) const;
  std::span<double> slice(const std::string& name);
  std::span<const double> slice(const std::string& name) const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  const std::vector<Slice>& slices() const { return slices_; }

  bool all_finite() const;

  /// FNV-1a over the raw bytes; used to detect parameter changes.
  std::uint64_t checksum() const;

  bool operator==(const ParamVector& other) const;

 private:
  std::vector<double> values_;
  std::vector<Slice> slices_;
};

/// A differentiable map from states to a fixed-width output vector.
///
/// Implementations are stateless shapes: parameters live in a ParamVector
/// slice owned by the caller, so a model can be copied by value.
class Approximator {
 public:
  virtual ~Approximator() = default;

  virtual std::string kind() const = 0;
  virtual std::size_t num_params() const = 0;
  virtual std::size_t output_width() const = 0;

  virtual void initialize(std::span<double> params, std::mt19937_64& rng) const = 0;

  /// Returns an (output_width x states.size()) matrix of clamped outputs.
  virtual Eigen::MatrixXd evaluate(std::span<const double> params, const DagEnv& env,
                                   std::span<const StateId> states) const = 0;

  /// Adds d(loss)/d(params) to grad, given upstream = d(loss)/d(outputs) with
  /// the same layout as evaluate(). Outputs that were clamped pass no gradient.
  virtual void accumulate_gradient(std::span<const double> params, const DagEnv& env,
                                   std::span<const StateId> states, const Eigen::MatrixXd& upstream,
                                   std::span<double> grad) const = 0;
};

/// One free parameter per (state, output slot).
class TabularApproximator final : public Approximator {
 public:
  TabularApproximator(std::size_t num_states, std::size_t width) : num_states_(num_states), width_(width) {}

  std::string kind() const override { return "tabular"; }
  std::size_t num_params() const override { return num_states_ * width_; }
  std::size_t output_width() const override { return width_; }
  std::size_t num_states() const { return num_states_; }

  /// Tables start at zero.
  void initialize(std::span<double> params, std::mt19937_64& rng) const override;
  Eigen::MatrixXd evaluate(std::span<const double> params, const DagEnv& env,
                           std::span<const StateId> states) const override;
  void accumulate_gradient(std::span<const double> params, const DagEnv& env, std::span<const StateId> states,
                           const Eigen::MatrixXd& upstream, std::span<double> grad) const override;

  /// Smallest |pre-activation| over both hidden layers for the given states,
  /// i.e. the distance to the nearest LeakyReLU kink.
  double kink_margin(std::span<const double> params, const DagEnv& env, std::span<const StateId> states) const;

 private:
  std::size_t num_states_;
  std::size_t width_;
};

/// input -> hidden -> hidden -> output with LeakyReLU(0.01) activations.
///
/// Parameter layout (column-major blocks): W0 (h x in), b0, W1 (h x h), b1,
/// W2 (out x h), b2.
class MlpApproximator final : public Approximator {
 public:
  static constexpr double kNegativeSlope = 0.01;

  MlpApproximator(std::size_t input_width, std::size_t hidden_width, std::size_t output_width);

  std::string kind() const override { return "mlp"; }
  std::size_t num_params() const override;
  std::size_t output_width() const override { return out_; }
  std::size_t input_width() const { return in_; }
  std::size_t hidden_width() const { return hidden_; }

  /// Weights and biases uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  void initialize(std::span<double> params, std::mt19937_64& rng) const override;

  /// Raw forward pass on explicit feature columns (input_width x N), clamped.
  Eigen::MatrixXd forward(std::span<const double> params, const Eigen::MatrixXd& features) const;
  void backward(std::span<const double> params, const Eigen::MatrixXd& features, const Eigen::MatrixXd& upstream,
                std::span<double> grad) const;

  Eigen::MatrixXd evaluate(std::span<const double> params, const DagEnv& env,
                           std::span<const StateId> states) const override;
  void accumulate_gradient(std::span<const double> params, const DagEnv& env, std::span<const StateId> states,
                           const Eigen::MatrixXd& upstream, std::span<double> grad) const override;

  /// Smallest |pre-activation| over both hidden layers for the given states,
  /// i.e. the distance to the nearest LeakyReLU kink.
  double kink_margin(std::span<const double> params, const DagEnv& env, std::span<const StateId> states) const;

 private:
  Eigen::MatrixXd features_of(const DagEnv& env, std::span<const StateId> states) const;

  std::size_t in_;
  std::size_t hidden_;
  std::size_t out_;
};

}  // namespace sgfn
