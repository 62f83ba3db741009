// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <utility>
#include <vector>

#include "stn/autodiff.hpp"
#include "stn/models.hpp"
#include "stn/tensor.hpp"

namespace stn::oracles {

/// L(lambda, w) = 1/2 w'Aw + w'B lambda + 1/2 lambda'C lambda + d'w + e'lambda + c
struct QuadraticProblem {
  Tensor A;  // (m, m) SPD
  Tensor B;  // (m, h)
  Tensor C;  // (h, h)
  Tensor d;  // (m)
  Tensor e;  // (h)
  double c = 0.0;

  std::size_t m() const { return A.rows(); }
  std::size_t h() const { return B.cols(); }
  void validate() const;
  double loss(const Tensor& lambda, const Tensor& w) const;
  ad::Var loss(ad::Var lambda, ad::Var w) const;
};

enum class LambdaTransform { kExp, kIdentity };

/// L_T = 1/2n |Xw - t|^2 + s(lambda)/(2n) |w|^2   (per_n)
///     = 1/2n |Xw - t|^2 + s(lambda)/2 |w|^2      (unscaled)
/// L_V = 1/2v |X_valid w - t_valid|^2
struct RidgeProblem {
  Tensor X;
  Tensor t;
  Tensor X_valid;
  Tensor t_valid;
  models::PenaltyScaling scaling = models::PenaltyScaling::kPerN;
  LambdaTransform transform = LambdaTransform::kExp;

  std::size_t n() const { return X.rows(); }
  std::size_t v() const { return X_valid.rows(); }
  std::size_t m() const { return X.cols(); }
  void validate() const;
  double to_domain(double lambda_raw) const;
  double to_raw(double lambda_domain) const;
  /// d lambda_domain / d lambda_raw
  double domain_derivative(double lambda_raw) const;
  /// Multiplier turning the penalty into the XtX + c*lambda*I normal equations.
  double penalty_factor() const;
  double validation_loss(const Tensor& w) const;
  double training_loss(double lambda_domain, const Tensor& w) const;
};

Tensor quadratic_best_response(const QuadraticProblem& p, const Tensor& lambda);
/// -A^{-1} B.
Tensor quadratic_br_jacobian(const QuadraticProblem& p);

Tensor ridge_best_response(const RidgeProblem& p, double lambda_domain);
/// (m, 1) Jacobian of the best response in RAW coordinates.
Tensor ridge_br_jacobian(const RidgeProblem& p, double lambda_domain);

/// Fixed point of the joint perturbed objective for base weights w0 with a
/// fixed response Theta (domain coordinates, (m, 1)): identity transform only.
Tensor stn_biased_fixed_point(const RidgeProblem& p, double lambda0_domain, const Tensor& theta, double sigma);

/// E_R[1/2n |(R . X) w - t|^2] for Bernoulli keep masks with keep = 1 - rate.
double dropout_expected_loss(const Tensor& X, const Tensor& t, double drop_rate, const Tensor& w);

/// L_V(r(lambda)) and its derivative in raw coordinates.
double bilevel_outer_objective(const RidgeProblem& p, double lambda_raw);
double bilevel_outer_grad(const RidgeProblem& p, double lambda_raw);

struct BilevelSolution {
  double lambda_raw = 0.0;
  double val_loss = 0.0;
  bool at_boundary = false;
};

/// Minimizes L_V(r(lambda)) over [lo, hi] (raw) with a 1024-point grid and
/// golden-section refinement to 1e-6. A minimizer on the bracket edge is an
/// error unless `allow_boundary`.
BilevelSolution bilevel_solve(const RidgeProblem& p, double lo, double hi, bool allow_boundary = false);

/// -[d2L/dw2]^{-1} d2L/dw dlambda for an SPD Hessian.
Tensor implicit_jacobian(const Tensor& hess_ww, const Tensor& hess_wl);
/// Lemma-style Jacobian assembled from the analytic Hessians of each problem.
Tensor implicit_jacobian_check(const RidgeProblem& p, double lambda_domain, const Tensor& w);
Tensor implicit_jacobian_check(const QuadraticProblem& p);

}  // namespace stn::oracles
