#include "sgfn/approximator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace sgfn {

double clamp_logit(double x) { return std::clamp(x, -kLogitClamp, kLogitClamp); }

// ---------------------------------------------------------------- ParamVector

std::size_t ParamVector::add_slice(std::string name, std::size_t size) {
  if (has_slice(name)) throw std::invalid_argument("ParamVector: duplicate slice " + name);
  const std::size_t offset = values_.size();
  slices_.push_back(Slice{std::move(name), offset, size});
  values_.resize(offset + size, 0.0);
  return offset;
}

bool ParamVector::has_slice(const std::string& name) const {
  return std::any_of(slices_.begin(), slices_.end(), [&](const Slice& s) { return s.name == name; });
}

const ParamVector::Slice& ParamVector::slice_info(const std::string& name) const {
  for (const auto& s : slices_) {
    if (s.name == name) return s;
  }
  throw std::out_of_range("ParamVector: no slice named " + name);
}

std::span<double> ParamVector::slice(const std::string& name) {
  const auto& s = slice_info(name);
  return std::span<double>(values_).subspan(s.offset, s.size);
}

std::span<const double> ParamVector::slice(const std::string& name) const {
  const auto& s = slice_info(name);
  return std::span<const double>(values_).subspan(s.offset, s.size);
}

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::uint64_t ParamVector::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (double v : values_) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

bool ParamVector::operator==(const ParamVector& other) const {
  if (slices_.size() != other.slices_.size() || values_.size() != other.values_.size()) return false;
  for (std::size_t i = 0; i < slices_.size(); ++i) {
    if (slices_[i].name != other.slices_[i].name || slices_[i].size != other.slices_[i].size) return false;
  }
  return std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(double)) == 0;
}

// -------------------------------------------------------- TabularApproximator

void TabularApproximator::initialize(std::span<double> params, std::mt19937_64&) const {
  std::fill(params.begin(), params.end(), 0.0);
}

Eigen::MatrixXd TabularApproximator::evaluate(std::span<const double> params, const DagEnv&,
                                              std::span<const StateId> states) const {
  Eigen::MatrixXd out(width_, states.size());
  for (std::size_t j = 0; j < states.size(); ++j) {
    if (states[j] >= num_states_) throw std::out_of_range("TabularApproximator: state out of range");
    const double* row = params.data() + static_cast<std::size_t>(states[j]) * width_;
    for (std::size_t k = 0; k < width_; ++k) out(k, j) = clamp_logit(row[k]);
  }
  return out;
}

void TabularApproximator::accumulate_gradient(std::span<const double> params, const DagEnv&,
                                              std::span<const StateId> states, const Eigen::MatrixXd& upstream,
                                              std::span<double> grad) const {
  for (std::size_t j = 0; j < states.size(); ++j) {
    const std::size_t base = static_cast<std::size_t>(states[j]) * width_;
    for (std::size_t k = 0; k < width_; ++k) {
      if (std::abs(params[base + k]) <= kLogitClamp) grad[base + k] += upstream(k, j);
    }
  }
}

// ------------------------------------------------------------ MlpApproximator

namespace {

struct MlpView {
  Eigen::Map<const Eigen::MatrixXd> w0;
  Eigen::Map<const Eigen::VectorXd> b0;
  Eigen::Map<const Eigen::MatrixXd> w1;
  Eigen::Map<const Eigen::VectorXd> b1;
  Eigen::Map<const Eigen::MatrixXd> w2;
  Eigen::Map<const Eigen::VectorXd> b2;
};

struct MlpGradView {
  Eigen::Map<Eigen::MatrixXd> w0;
  Eigen::Map<Eigen::VectorXd> b0;
  Eigen::Map<Eigen::MatrixXd> w1;
  Eigen::Map<Eigen::VectorXd> b1;
  Eigen::Map<Eigen::MatrixXd> w2;
  Eigen::Map<Eigen::VectorXd> b2;
};

template <typename Ptr, typename View, typename Mat, typename Vec>
View make_view(Ptr p, Eigen::Index in, Eigen::Index h, Eigen::Index out) {
  Ptr w0 = p;
  Ptr b0 = w0 + h * in;
  Ptr w1 = b0 + h;
  Ptr b1 = w1 + h * h;
  Ptr w2 = b1 + h;
  Ptr b2 = w2 + out * h;
  return View{Mat(w0, h, in), Vec(b0, h), Mat(w1, h, h), Vec(b1, h), Mat(w2, out, h), Vec(b2, out)};
}

MlpView view_of(std::span<const double> p, std::size_t in, std::size_t h, std::size_t out) {
  return make_view<const double*, MlpView, Eigen::Map<const Eigen::MatrixXd>, Eigen::Map<const Eigen::VectorXd>>(
      p.data(), static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(out));
}

MlpGradView grad_view_of(std::span<double> p, std::size_t in, std::size_t h, std::size_t out) {
  return make_view<double*, MlpGradView, Eigen::Map<Eigen::MatrixXd>, Eigen::Map<Eigen::VectorXd>>(
      p.data(), static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(out));
}

inline double leaky(double x) { return x > 0.0 ? x : MlpApproximator::kNegativeSlope * x; }
inline double leaky_grad(double x) { return x > 0.0 ? 1.0 : MlpApproximator::kNegativeSlope; }

}  // namespace

MlpApproximator::MlpApproximator(std::size_t input_width, std::size_t hidden_width, std::size_t output_width)
    : in_(input_width), hidden_(hidden_width), out_(output_width) {
  if (in_ == 0 || hidden_ == 0 || out_ == 0) throw std::invalid_argument("MlpApproximator: zero width");
}

std::size_t MlpApproximator::num_params() const {
  return hidden_ * in_ + hidden_ + hidden_ * hidden_ + hidden_ + out_ * hidden_ + out_;
}

void MlpApproximator::initialize(std::span<double> params, std::mt19937_64& rng) const {
  if (params.size() != num_params()) throw std::invalid_argument("MlpApproximator::initialize: size mismatch");
  auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < count; ++i) params[offset + i] = u(rng);
  };
  std::size_t off = 0;
  fill(off, hidden_ * in_ + hidden_, in_);
  off += hidden_ * in_ + hidden_;
  fill(off, hidden_ * hidden_ + hidden_, hidden_);
  off += hidden_ * hidden_ + hidden_;
  fill(off, out_ * hidden_ + out_, hidden_);
}

Eigen::MatrixXd MlpApproximator::features_of(const DagEnv& env, std::span<const StateId> states) const {
  if (env.feature_width() != in_) throw std::invalid_argument("MlpApproximator: feature width does not match input width");
  Eigen::MatrixXd x(in_, states.size());
  for (std::size_t j = 0; j < states.size(); ++j) {
    env.encode(states[j], std::span<double>(x.col(static_cast<Eigen::Index>(j)).data(), in_));
  }
  return x;
}

Eigen::MatrixXd MlpApproximator::forward(std::span<const double> params, const Eigen::MatrixXd& x) const {
  if (static_cast<std::size_t>(x.rows()) != in_) throw std::invalid_argument("MlpApproximator: dimension mismatch");
  if (params.size() != num_params()) throw std::invalid_argument("MlpApproximator: parameter size mismatch");
  const auto v = view_of(params, in_, hidden_, out_);
  Eigen::MatrixXd a0 = ((v.w0 * x).colwise() + v.b0).unaryExpr(&leaky);
  Eigen::MatrixXd a1 = ((v.w1 * a0).colwise() + v.b1).unaryExpr(&leaky);
  Eigen::MatrixXd y = (v.w2 * a1).colwise() + v.b2;
  return y.unaryExpr(&clamp_logit);
}

void MlpApproximator::backward(std::span<const double> params, const Eigen::MatrixXd& x, const Eigen::MatrixXd& upstream,
                               std::span<double> grad) const {
  if (static_cast<std::size_t>(x.rows()) != in_) throw std::invalid_argument("MlpApproximator: dimension mismatch");
  if (upstream.rows() != static_cast<Eigen::Index>(out_) || upstream.cols() != x.cols())
    throw std::invalid_argument("MlpApproximator: upstream gradient shape mismatch");
  const auto v = view_of(params, in_, hidden_, out_);
  auto g = grad_view_of(grad, in_, hidden_, out_);

  const Eigen::MatrixXd z0 = (v.w0 * x).colwise() + v.b0;
  const Eigen::MatrixXd a0 = z0.unaryExpr(&leaky);
  const Eigen::MatrixXd z1 = (v.w1 * a0).colwise() + v.b1;
  const Eigen::MatrixXd a1 = z1.unaryExpr(&leaky);
  const Eigen::MatrixXd y = (v.w2 * a1).colwise() + v.b2;

  const Eigen::MatrixXd dy =
      upstream.cwiseProduct(y.unaryExpr([](double t) { return std::abs(t) <= kLogitClamp ? 1.0 : 0.0; }));
  g.w2.noalias() += dy * a1.transpose();
  g.b2 += dy.rowwise().sum();
  const Eigen::MatrixXd dz1 = (v.w2.transpose() * dy).cwiseProduct(z1.unaryExpr(&leaky_grad));
  g.w1.noalias() += dz1 * a0.transpose();
  g.b1 += dz1.rowwise().sum();
  const Eigen::MatrixXd dz0 = (v.w1.transpose() * dz1).cwiseProduct(z0.unaryExpr(&leaky_grad));
  g.w0.noalias() += dz0 * x.transpose();
  g.b0 += dz0.rowwise().sum();
}

Eigen::MatrixXd MlpApproximator::evaluate(std::span<const double> params, const DagEnv& env,
                                          std::span<const StateId> states) const {
  return forward(params, features_of(env, states));
}

double MlpApproximator::kink_margin(std::span<const double> params, const DagEnv& env,
                                    std::span<const StateId> states) const {
  const auto v = view_of(params, in_, hidden_, out_);
  const Eigen::MatrixXd z0 = (v.w0 * features_of(env, states)).colwise() + v.b0;
  const Eigen::MatrixXd z1 = (v.w1 * z0.unaryExpr(&leaky)).colwise() + v.b1;
  return std::min(z0.cwiseAbs().minCoeff(), z1.cwiseAbs().minCoeff());
}

void MlpApproximator::accumulate_gradient(std::span<const double> params, const DagEnv& env,
                                          std::span<const StateId> states, const Eigen::MatrixXd& upstream,
                                          std::span<double> grad) const {
  backward(params, features_of(env, states), upstream, grad);
}

}  // namespace sgfn
