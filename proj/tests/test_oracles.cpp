// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "stn/analysis.hpp"
#include "stn/error.hpp"
#include "stn/oracles.hpp"
#include "support.hpp"

using namespace stn;
using namespace stn::oracles;

namespace {

Tensor random_spd(RngStream& rng, std::size_t n, double shift = 0.5) {
  Tensor M = testing::random_tensor(rng, {n, n});
  return matmul(M, transpose(M)) + shift * identity(n);
}

QuadraticProblem random_quadratic(RngStream& rng, std::size_t m, std::size_t h) {
  return {random_spd(rng, m), testing::random_tensor(rng, {m, h}), random_spd(rng, h),
          testing::random_tensor(rng, {m}), testing::random_tensor(rng, {h}), 0.3};
}

RidgeProblem random_ridge(RngStream& rng, std::size_t n, std::size_t d, LambdaTransform tr,
                          models::PenaltyScaling sc = models::PenaltyScaling::kPerN) {
  Tensor w = testing::random_tensor(rng, {d});
  auto gen = [&](std::size_t rows, Tensor& X, Tensor& t) {
    X = testing::random_tensor(rng, {rows, d});
    t = matvec(X, w);
    for (auto& v : t.data()) v += 0.5 * rng.normal();
  };
  RidgeProblem p;
  gen(n, p.X, p.t);
  gen(n, p.X_valid, p.t_valid);
  p.transform = tr;
  p.scaling = sc;
  return p;
}

}  // namespace

TEST_CASE("quadratic best response is stationary") {
  RngStream rng(1, "q");
  auto q = random_quadratic(rng, 5, 2);
  Tensor lam = Tensor::vector({0.4, -1.0});
  Tensor w = quadratic_best_response(q, lam);
  Tensor g = matvec(q.A, w) + matvec(q.B, lam) + q.d;
  CHECK(testing::max_abs(g) < 1e-12);
  CHECK(testing::max_rel_diff(quadratic_br_jacobian(q), implicit_jacobian_check(q)) < 1e-12);
  // Autodiff form of the loss matches the closed form.
  ad::Tape tape;
  auto v = q.loss(tape.leaf(lam), tape.leaf(w));
  CHECK(v.value().item() == doctest::Approx(q.loss(lam, w)));
}

TEST_CASE("quadratic validation") {
  RngStream rng(2, "q");
  auto q = random_quadratic(rng, 3, 1);
  q.A = Tensor::matrix({{1, 0, 0}, {0, -1, 0}, {0, 0, 1}});
  CHECK_THROWS_AS(quadratic_br_jacobian(q), Error);
  try {
    q.validate();
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNotPositiveDefinite);
  }
}

TEST_CASE("ridge Jacobian in raw coordinates") {
  for (auto tr : {LambdaTransform::kExp, LambdaTransform::kIdentity}) {
    for (auto sc : {models::PenaltyScaling::kPerN, models::PenaltyScaling::kUnscaled}) {
      RngStream rng(3, "r");
      auto p = random_ridge(rng, 20, 4, tr, sc);
      const double raw = 0.3;
      Tensor J = ridge_br_jacobian(p, p.to_domain(raw));
      const double h = 1e-5;
      Tensor fd = (1.0 / (2 * h)) * (ridge_best_response(p, p.to_domain(raw + h)) -
                                     ridge_best_response(p, p.to_domain(raw - h)));
      CHECK(testing::max_rel_diff(J.reshaped({4}), fd) < 1e-7);
      Tensor w = ridge_best_response(p, p.to_domain(raw));
      CHECK(testing::max_rel_diff(implicit_jacobian_check(p, p.to_domain(raw), w), J) < 1e-10);
    }
  }
}

TEST_CASE("ridge best response minimizes the training loss") {
  RngStream rng(4, "r");
  auto p = random_ridge(rng, 15, 3, LambdaTransform::kExp);
  Tensor w = ridge_best_response(p, 0.7);
  const double base = p.training_loss(0.7, w);
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor u = w;
    u[i] += 1e-3;
    CHECK(p.training_loss(0.7, u) > base);
  }
}

TEST_CASE("biased fixed point satisfies the expected stationarity condition") {
  RngStream rng(5, "r");
  auto p = random_ridge(rng, 12, 3, LambdaTransform::kIdentity);
  Tensor theta = testing::random_tensor(rng, {3, 1});
  const double lam0 = 0.8, sigma = 0.6;
  Tensor w0 = stn_biased_fixed_point(p, lam0, theta, sigma);
  // E_eps grad_w L_T(lam0 + eps, w0 + theta eps) over eps in {0, +-sqrt3 sigma}.
  Tensor g = Tensor::zeros({3});
  const double nodes[3] = {0.0, std::sqrt(3.0) * sigma, -std::sqrt(3.0) * sigma};
  const double wts[3] = {2.0 / 3, 1.0 / 6, 1.0 / 6};
  for (int k = 0; k < 3; ++k) {
    Tensor w = w0 + nodes[k] * theta.reshaped({3});
    Tensor r = matvec(p.X, w) - p.t;
    g = g + wts[k] * (matvec(transpose(p.X), r) + (lam0 + nodes[k]) * w);
  }
  CHECK(testing::max_abs(g) < 1e-12);
  p.transform = LambdaTransform::kExp;
  CHECK_THROWS_AS(stn_biased_fixed_point(p, lam0, theta, sigma), Error);
}

TEST_CASE("dropout expected loss matches Monte Carlo") {
  RngStream rng(6, "d");
  Tensor X = testing::random_tensor(rng, {6, 3});
  Tensor t = testing::random_tensor(rng, {6});
  Tensor w = testing::random_tensor(rng, {3});
  const double rate = 0.3;
  const double exact = dropout_expected_loss(X, t, rate, w);
  double mc = 0;
  const int draws = 200000;
  for (int k = 0; k < draws; ++k) {
    Tensor Xm = X;
    for (auto& v : Xm.data()) v *= rng.bernoulli(1 - rate) ? 1.0 : 0.0;
    Tensor r = matvec(Xm, w) - t;
    mc += dot(r, r) / 12.0;
  }
  CHECK(mc / draws == doctest::Approx(exact).epsilon(5e-3));
  // Zero rate reduces to the plain loss.
  Tensor r = matvec(X, w) - t;
  CHECK(dropout_expected_loss(X, t, 0.0, w) == doctest::Approx(dot(r, r) / 12.0));
}

TEST_CASE("outer gradient and bilevel solve") {
  RngStream rng(7, "b");
  auto p = random_ridge(rng, 10, 8, LambdaTransform::kExp);
  const double h = 1e-5;
  for (double raw : {-2.0, 0.0, 1.5}) {
    const double fd = (bilevel_outer_objective(p, raw + h) - bilevel_outer_objective(p, raw - h)) / (2 * h);
    CHECK(bilevel_outer_grad(p, raw) == doctest::Approx(fd).epsilon(1e-6));
  }
  auto sol = bilevel_solve(p, -8.0, 6.0, true);
  if (!sol.at_boundary) CHECK(std::abs(bilevel_outer_grad(p, sol.lambda_raw)) < 1e-5);
  for (int i = 0; i <= 20; ++i) CHECK(sol.val_loss <= bilevel_outer_objective(p, -8.0 + 0.7 * i) + 1e-12);
}

TEST_CASE("bilevel solve reports a boundary minimum") {
  RngStream rng(8, "b");
  auto p = random_ridge(rng, 30, 3, LambdaTransform::kExp);
  p.X_valid = p.X;
  p.t_valid = p.t;
  // Validation equals training: less regularization is always better.
  CHECK_THROWS_AS(bilevel_solve(p, -4.0, 2.0), Error);
  auto sol = bilevel_solve(p, -4.0, 2.0, true);
  CHECK(sol.at_boundary);
  CHECK(sol.lambda_raw == -4.0);
}

TEST_CASE("kronecker condition numbers multiply") {
  RngStream rng(9, "k");
  for (int i = 0; i < 10; ++i) {
    auto A = random_spd(rng, 2 + i % 4, 0.1);
    auto B = random_spd(rng, 3, 0.1);
    auto k = analysis::kron_condition(A, B);
    CHECK(k.kappa_kron == doctest::Approx(k.kappa_a * k.kappa_b).epsilon(1e-8));
  }
  CHECK_THROWS_AS(analysis::kron_condition(Tensor::matrix({{1, 0}, {0, -1}}), identity(2)), Error);
  CHECK(analysis::kron(identity(2), Tensor::matrix({{1, 2}, {3, 4}})).at(3, 2) == 3.0);
}

TEST_CASE("second moment conditioning") {
  Tensor lam = Tensor::zeros({4});
  lam[0] = std::sqrt(99.0);
  auto sm = analysis::second_moment_decomposition(lam, Tensor::ones({4}));
  CHECK(sm.kappa == doctest::Approx(100.0).epsilon(1e-12));
  auto centered = analysis::second_moment_decomposition(Tensor::zeros({4}), Tensor::ones({4}));
  CHECK(centered.kappa == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(analysis::second_moment_decomposition(lam, Tensor::zeros({4})), Error);
}

TEST_CASE("gauss newton assembly") {
  RngStream rng(10, "g");
  Tensor J = testing::random_tensor(rng, {2, 3});
  Tensor Hy = identity(2);
  Tensor l = Tensor::vector({0.5, 1.0});
  Tensor G = analysis::hypernet_gauss_newton({{l, J, Hy}});
  Tensor expect = analysis::kron(outer(l, l), matmul(transpose(J), J));
  CHECK(G == expect);
  Tensor big = Tensor::zeros({1, 4096});
  CHECK_THROWS_AS(analysis::hypernet_gauss_newton({{l, big, identity(1)}}), Error);
  auto rep = analysis::conditioning_report(outer(l, l) + 0.1 * identity(2), identity(3));
  CHECK(rep.kappa_product == doctest::Approx(rep.kappa_lambda));
}

TEST_CASE("alignment and spike term") {
  CHECK(analysis::gradient_alignment(Tensor::vector({1, 0}), Tensor::vector({2, 0})) == doctest::Approx(1.0));
  CHECK(analysis::gradient_alignment(Tensor::vector({1, 0}), Tensor::vector({0, 3})) == doctest::Approx(0.0));
  CHECK_THROWS_AS(analysis::gradient_alignment(Tensor::vector({0, 0}), Tensor::vector({1, 0})), Error);
  Tensor s = analysis::predicted_spike_term(Tensor::vector({1, 2}), Tensor::vector({3, 1}), Tensor::vector({2.0}), 0.1);
  CHECK(s[0] == doctest::Approx(-0.1 * 5 * 2));
}
