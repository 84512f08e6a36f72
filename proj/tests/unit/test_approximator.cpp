#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "sgfn/approximator.hpp"
#include "sgfn/env.hpp"
#include "sgfn/optimizer.hpp"

using namespace sgfn;

namespace {

double leaky(double x) { return x > 0.0 ? x : 0.01 * x; }

// Plain-loop forward pass with the documented column-major layout.
std::vector<double> naive_mlp(const std::vector<double>& p, std::size_t in, std::size_t h, std::size_t out,
                              const std::vector<double>& x) {
  std::size_t o = 0;
  auto W = [&](std::size_t rows, std::size_t cols) {
    std::vector<std::vector<double>> w(rows, std::vector<double>(cols));
    for (std::size_t c = 0; c < cols; ++c)
      for (std::size_t r = 0; r < rows; ++r) w[r][c] = p[o++];
    return w;
  };
  auto B = [&](std::size_t n) {
    std::vector<double> b(p.begin() + static_cast<long>(o), p.begin() + static_cast<long>(o + n));
    o += n;
    return b;
  };
  const auto w0 = W(h, in);
  const auto b0 = B(h);
  const auto w1 = W(h, h);
  const auto b1 = B(h);
  const auto w2 = W(out, h);
  const auto b2 = B(out);
  std::vector<double> h0(h), h1(h), y(out);
  for (std::size_t r = 0; r < h; ++r) {
    double s = b0[r];
    for (std::size_t c = 0; c < in; ++c) s += w0[r][c] * x[c];
    h0[r] = leaky(s);
  }
  for (std::size_t r = 0; r < h; ++r) {
    double s = b1[r];
    for (std::size_t c = 0; c < h; ++c) s += w1[r][c] * h0[c];
    h1[r] = leaky(s);
  }
  for (std::size_t r = 0; r < out; ++r) {
    double s = b2[r];
    for (std::size_t c = 0; c < h; ++c) s += w2[r][c] * h1[c];
    y[r] = std::clamp(s, -50.0, 50.0);
  }
  return y;
}

}  // namespace

TEST_CASE("mlp forward: zero net, hand-evaluated net, clamping") {
  MlpApproximator net(1, 1, 1);
  REQUIRE(net.num_params() == 6);
  Eigen::MatrixXd x(1, 1);
  x(0, 0) = 0.5;
  std::vector<double> zeros(6, 0.0);
  CHECK(net.forward(zeros, x)(0, 0) == 0.0);
  std::vector<double> p = {1.0, 0.0, 1.0, 0.0, 2.0, 0.0};
  CHECK(net.forward(p, x)(0, 0) == doctest::Approx(1.0));
  p[4] = 180.0;  // affine output 90
  CHECK(net.forward(p, x)(0, 0) == 50.0);
  p[4] = -180.0;
  CHECK(net.forward(p, x)(0, 0) == -50.0);
}

TEST_CASE("mlp forward agrees with a plain-loop implementation") {
  std::mt19937_64 rng(7);
  MlpApproximator net(5, 4, 3);
  std::vector<double> p(net.num_params());
  net.initialize(p, rng);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd x(5, 4);
  for (Eigen::Index j = 0; j < 4; ++j)
    for (Eigen::Index i = 0; i < 5; ++i) x(i, j) = u(rng);
  const Eigen::MatrixXd y = net.forward(p, x);
  for (Eigen::Index j = 0; j < 4; ++j) {
    std::vector<double> col(5);
    for (Eigen::Index i = 0; i < 5; ++i) col[static_cast<std::size_t>(i)] = x(i, j);
    const auto ref = naive_mlp(p, 5, 4, 3, col);
    for (Eigen::Index r = 0; r < 3; ++r) CHECK(y(r, j) == doctest::Approx(ref[static_cast<std::size_t>(r)]).epsilon(1e-12));
  }
}

TEST_CASE("mlp initialization respects the fan-in range") {
  std::mt19937_64 rng(3);
  MlpApproximator net(16, 8, 2);
  std::vector<double> p(net.num_params());
  net.initialize(p, rng);
  const double b0 = 1.0 / std::sqrt(16.0);
  for (std::size_t i = 0; i < 16 * 8 + 8; ++i) CHECK(std::abs(p[i]) <= b0);
}

TEST_CASE("gradient checks on tabular and mlp heads") {
  RegularTree env(2, 2);
  std::vector<StateId> states = {0, 1, 2, 4};

  SUBCASE("quadratic loss on a table") {
    TabularApproximator tab(env.num_states(), 2);
    std::vector<double> p(tab.num_params());
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1, 1);
    for (double& v : p) v = u(rng);
    const LossWithGradient f = [&](std::span<const double> q, std::span<double> g) {
      const Eigen::MatrixXd y = tab.evaluate(q, env, states);
      if (!g.empty()) {
        std::fill(g.begin(), g.end(), 0.0);
        tab.accumulate_gradient(q, env, states, 2.0 * y, g);
      }
      return y.squaredNorm();
    };
    CHECK(grad_check(p, f, 100, 5).max_relative_error < 1e-6);
  }

  SUBCASE("nonlinear loss through an mlp") {
    MlpApproximator net(env.feature_width(), 6, 3);
    std::vector<double> p(net.num_params());
    std::mt19937_64 rng(2);
    net.initialize(p, rng);
    Eigen::MatrixXd target = Eigen::MatrixXd::Random(3, static_cast<Eigen::Index>(states.size()));
    const LossWithGradient f = [&](std::span<const double> q, std::span<double> g) {
      const Eigen::MatrixXd y = net.evaluate(q, env, states);
      const Eigen::MatrixXd d = y - target;
      if (!g.empty()) {
        std::fill(g.begin(), g.end(), 0.0);
        net.accumulate_gradient(q, env, states, 2.0 * d, g);
      }
      return d.squaredNorm();
    };
    CHECK(grad_check(p, f, 200, 6).max_relative_error < 1e-4);
  }

  SUBCASE("constant loss has zero gradient both ways") {
    std::vector<double> p(10, 0.3);
    const LossWithGradient f = [](std::span<const double>, std::span<double> g) {
      std::fill(g.begin(), g.end(), 0.0);
      return 4.0;
    };
    const auto r = grad_check(p, f, 10, 1);
    CHECK(r.max_relative_error == 0.0);
    CHECK(r.worst_analytic == 0.0);
    CHECK(r.worst_numeric == 0.0);
  }
}

TEST_CASE("clamped outputs pass no gradient") {
  MlpApproximator net(1, 1, 1);
  std::vector<double> p = {1.0, 0.0, 1.0, 0.0, 180.0, 0.0};
  Eigen::MatrixXd x(1, 1);
  x(0, 0) = 0.5;
  std::vector<double> g(6, 0.0);
  net.backward(p, x, Eigen::MatrixXd::Ones(1, 1), g);
  for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("gradient norm clipping") {
  std::vector<double> g = {3.0, 4.0};
  CHECK(clip_grad_norm(g, 10.0) == doctest::Approx(5.0));
  CHECK(g == std::vector<double>{3.0, 4.0});

  g = {30.0, 40.0};
  CHECK(clip_grad_norm(g, 10.0) == doctest::Approx(50.0));
  CHECK(g[0] == doctest::Approx(6.0));
  CHECK(g[1] == doctest::Approx(8.0));

  std::vector<double> once = g;
  clip_grad_norm(once, 10.0);
  CHECK(once == g);  // idempotent

  g = {0.0, 0.0};
  clip_grad_norm(g, 10.0);
  CHECK(g == std::vector<double>{0.0, 0.0});

  g = {std::nan(""), 1.0};
  CHECK_THROWS(clip_grad_norm(g, 10.0));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParamVector pv;
  pv.add_slice("a", 3);
  pv.slice("a")[1] = 0.7;
  AdamOptimizer opt(pv, 0.1);
  const ParamVector before = pv;
  std::vector<double> zero(3, 0.0);
  for (int i = 0; i < 5; ++i) opt.step(pv, zero);
  CHECK(pv == before);
}

TEST_CASE("adam: first step is lr * g / (|g| + eps) per slice") {
  ParamVector pv;
  pv.add_slice("w", 2);
  pv.add_slice("log_z", 1);
  AdamOptimizer opt(pv, 1e-3);
  opt.set_learning_rate("log_z", 1e-1);
  std::vector<double> g = {2.0, -0.5, 3.0};
  opt.step(pv, g);
  const double eps = 1e-8;
  CHECK(pv.values()[0] == doctest::Approx(-1e-3 * 2.0 / (2.0 + eps)).epsilon(1e-12));
  CHECK(pv.values()[1] == doctest::Approx(1e-3 * 0.5 / (0.5 + eps)).epsilon(1e-12));
  CHECK(pv.values()[2] == doctest::Approx(-1e-1 * 3.0 / (3.0 + eps)).epsilon(1e-12));
  CHECK(opt.step_count() == 1);

  // Second step by the textbook recursion.
  std::vector<double> g2 = {1.0, 1.0, 1.0};
  const double p0 = pv.values()[0];
  opt.step(pv, g2);
  const double m = 0.9 * (0.1 * 2.0) + 0.1 * 1.0;
  const double v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0;
  const double mhat = m / (1 - 0.81);
  const double vhat = v / (1 - 0.999 * 0.999);
  CHECK(pv.values()[0] == doctest::Approx(p0 - 1e-3 * mhat / (std::sqrt(vhat) + eps)).epsilon(1e-12));
}

TEST_CASE("adam rejects non-finite gradients without touching parameters") {
  ParamVector pv;
  pv.add_slice("w", 2);
  AdamOptimizer opt(pv, 1e-3);
  const ParamVector before = pv;
  std::vector<double> g = {INFINITY, 0.0};
  CHECK_THROWS(opt.step(pv, g));
  CHECK(pv == before);
  CHECK(opt.step_count() == 0);
}

TEST_CASE("param vector slices") {
  ParamVector pv;
  CHECK(pv.add_slice("a", 2) == 0);
  CHECK(pv.add_slice("b", 3) == 2);
  CHECK(pv.size() == 5);
  CHECK(pv.slice_info("b").offset == 2);
  CHECK_THROWS(pv.add_slice("a", 1));
  const auto c0 = pv.checksum();
  pv.slice("b")[0] = 1.0;
  CHECK(pv.checksum() != c0);
  CHECK(pv.all_finite());
  pv.slice("a")[0] = NAN;
  CHECK_FALSE(pv.all_finite());
}
