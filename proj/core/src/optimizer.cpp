#include "sgfn/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace sgfn {

AdamOptimizer::AdamOptimizer(const ParamVector& params, double learning_rate, Options options)
    : options_(options), layout_(params.slices()), m_(params.size(), 0.0), v_(params.size(), 0.0) {
  for (const auto& s : layout_) lr_[s.name] = learning_rate;
  rebuild_lr_table();
}

void AdamOptimizer::rebuild_lr_table() {
  per_param_lr_.assign(m_.size(), 0.0);
  for (const auto& s : layout_) {
    const double lr = lr_.at(s.name);
    std::fill_n(per_param_lr_.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size, lr);
  }
}

void AdamOptimizer::set_learning_rate(const std::string& slice, double lr) {
  if (!lr_.contains(slice)) throw std::out_of_range("AdamOptimizer: no slice named " + slice);
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("AdamOptimizer: invalid learning rate");
  lr_[slice] = lr;
  rebuild_lr_table();
}

double AdamOptimizer::learning_rate(const std::string& slice) const { return lr_.at(slice); }

void AdamOptimizer::step(ParamVector& params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    throw std::invalid_argument("AdamOptimizer::step: size mismatch");
  for (double g : grad) {
    if (!std::isfinite(g)) throw std::runtime_error("AdamOptimizer::step: non-finite gradient");
  }
  const auto t = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(options_.beta1, t);
  const double bc2 = 1.0 - std::pow(options_.beta2, t);
  std::vector<double> m = m_;
  std::vector<double> v = v_;
  std::vector<double> next(params.values().begin(), params.values().end());
  for (std::size_t i = 0; i < next.size(); ++i) {
    m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * grad[i];
    v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    next[i] -= per_param_lr_[i] * mhat / (std::sqrt(vhat) + options_.eps);
    if (!std::isfinite(next[i])) throw std::runtime_error("AdamOptimizer::step: update produced a non-finite parameter");
  }
  std::copy(next.begin(), next.end(), params.values().begin());
  m_ = std::move(m);
  v_ = std::move(v);
  ++step_;
}

void AdamOptimizer::restore(std::uint64_t step, std::vector<double> m, std::vector<double> v,
                            std::map<std::string, double> lr, Options options) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw std::invalid_argument("AdamOptimizer::restore: size mismatch");
  for (const auto& s : layout_) {
    if (!lr.contains(s.name)) throw std::invalid_argument("AdamOptimizer::restore: missing learning rate for " + s.name);
  }
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
  lr_ = std::move(lr);
  options_ = options;
  rebuild_lr_table();
}

double l2_norm(std::span<const double> g) {
  double s = 0.0;
  for (double x : g) s += x * x;
  return std::sqrt(s);
}

double clip_grad_norm(std::span<double> g, double max_norm) {
  for (double x : g) {
    if (!std::isfinite(x)) throw std::runtime_error("clip_grad_norm: non-finite gradient");
  }
  const double norm = l2_norm(g);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& x : g) x *= scale;
  }
  return norm;
}

GradCheckResult grad_check(std::span<const double> params, const LossWithGradient& loss, std::size_t max_params,
                           std::uint64_t seed, double step, double floor) {
  std::vector<double> p(params.begin(), params.end());
  std::vector<double> analytic(p.size(), 0.0);
  loss(p, analytic);

  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  if (idx.size() > max_params) idx.resize(max_params);

  GradCheckResult result;
  for (std::size_t i : idx) {
    const double saved = p[i];
    p[i] = saved + step;
    const double up = loss(p, {});
    p[i] = saved - step;
    const double down = loss(p, {});
    p[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    ++result.checked;
    if (err > result.max_relative_error || result.checked == 1) {
      result.max_relative_error = std::max(result.max_relative_error, err);
      result.worst_index = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace sgfn
