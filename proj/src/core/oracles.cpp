// SPDX-License-Identifier: Apache-2.0
#include "stn/oracles.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "eigen_bridge.hpp"

namespace stn::oracles {

using detail::Mat;
using detail::Vec;
using detail::from_mat;
using detail::from_vec;
using detail::to_mat;
using detail::to_vec;

namespace {

void require_vector(const Tensor& t, std::size_t n, const std::string& what) {
  require(t.numel() == n && t.rank() <= 2, ErrorCode::kShapeMismatch,
          what + " must have " + std::to_string(n) + " entries, got shape " + shape_str(t.shape()));
}

Vec ridge_rhs(const RidgeProblem& p) { return to_mat(p.X).transpose() * to_vec(p.t); }

Mat ridge_system(const RidgeProblem& p, double lambda_domain) {
  const Mat X = to_mat(p.X);
  Mat H = X.transpose() * X;
  H.diagonal().array() += p.penalty_factor() * lambda_domain;
  return H;
}

}  // namespace

void QuadraticProblem::validate() const {
  require(A.rank() == 2 && A.rows() == A.cols() && A.rows() > 0, ErrorCode::kShapeMismatch,
          "A must be square, got " + shape_str(A.shape()));
  require(B.rank() == 2 && B.rows() == m(), ErrorCode::kShapeMismatch,
          "B must be (m, h), got " + shape_str(B.shape()));
  require(C.rank() == 2 && C.rows() == h() && C.cols() == h(), ErrorCode::kShapeMismatch,
          "C must be (h, h), got " + shape_str(C.shape()));
  require_vector(d, m(), "d");
  require_vector(e, h(), "e");
  detail::spd_factor(to_mat(A), "A");
}

double QuadraticProblem::loss(const Tensor& lambda, const Tensor& w) const {
  const Vec l = to_vec(lambda), x = to_vec(w);
  const Mat Am = to_mat(A), Bm = to_mat(B), Cm = to_mat(C);
  return 0.5 * x.dot(Am * x) + x.dot(Bm * l) + 0.5 * l.dot(Cm * l) + to_vec(d).dot(x) + to_vec(e).dot(l) + c;
}

ad::Var QuadraticProblem::loss(ad::Var lambda, ad::Var w) const {
  ad::Tape& tape = w.tape();
  const ad::Var Av = tape.constant(A), Bv = tape.constant(B), Cv = tape.constant(C);
  ad::Var out = ad::scale(ad::dot(w, ad::matvec(Av, w)), 0.5);
  out = ad::add(out, ad::dot(w, ad::matvec(Bv, lambda)));
  out = ad::add(out, ad::scale(ad::dot(lambda, ad::matvec(Cv, lambda)), 0.5));
  out = ad::add(out, ad::dot(tape.constant(d.reshaped({m()})), w));
  out = ad::add(out, ad::dot(tape.constant(e.reshaped({h()})), lambda));
  return ad::add_scalar(out, c);
}

void RidgeProblem::validate() const {
  require(X.rank() == 2 && X.rows() > 0 && X.cols() > 0, ErrorCode::kShapeMismatch,
          "X must be a non-empty matrix, got " + shape_str(X.shape()));
  require_vector(t, n(), "t");
  require(X_valid.rank() == 2 && X_valid.cols() == m() && X_valid.rows() > 0, ErrorCode::kShapeMismatch,
          "X_valid must be (v, " + std::to_string(m()) + "), got " + shape_str(X_valid.shape()));
  require_vector(t_valid, v(), "t_valid");
  require(X.all_finite() && t.all_finite() && X_valid.all_finite() && t_valid.all_finite(), ErrorCode::kNonFinite,
          "ridge data contains non-finite values");
}

double RidgeProblem::to_domain(double lambda_raw) const {
  return transform == LambdaTransform::kExp ? std::exp(lambda_raw) : lambda_raw;
}

double RidgeProblem::to_raw(double lambda_domain) const {
  if (transform == LambdaTransform::kIdentity) return lambda_domain;
  require(lambda_domain > 0.0, ErrorCode::kInvalidArgument, "exp-transformed lambda must be positive");
  return std::log(lambda_domain);
}

double RidgeProblem::domain_derivative(double lambda_raw) const {
  return transform == LambdaTransform::kExp ? std::exp(lambda_raw) : 1.0;
}

double RidgeProblem::penalty_factor() const {
  return scaling == models::PenaltyScaling::kPerN ? 1.0 : static_cast<double>(n());
}

double RidgeProblem::validation_loss(const Tensor& w) const {
  const Vec r = to_mat(X_valid) * to_vec(w) - to_vec(t_valid);
  return r.squaredNorm() / (2.0 * static_cast<double>(v()));
}

double RidgeProblem::training_loss(double lambda_domain, const Tensor& w) const {
  const Vec x = to_vec(w);
  const Vec r = to_mat(X) * x - to_vec(t);
  return (r.squaredNorm() + penalty_factor() * lambda_domain * x.squaredNorm()) / (2.0 * static_cast<double>(n()));
}

Tensor quadratic_best_response(const QuadraticProblem& p, const Tensor& lambda) {
  p.validate();
  require_vector(lambda, p.h(), "lambda");
  const auto llt = detail::spd_factor(to_mat(p.A), "A");
  return from_vec(-llt.solve(to_mat(p.B) * to_vec(lambda) + to_vec(p.d)));
}

Tensor quadratic_br_jacobian(const QuadraticProblem& p) {
  p.validate();
  const auto llt = detail::spd_factor(to_mat(p.A), "A");
  return from_mat(-llt.solve(to_mat(p.B)));
}

Tensor ridge_best_response(const RidgeProblem& p, double lambda_domain) {
  p.validate();
  require(std::isfinite(lambda_domain), ErrorCode::kNonFinite, "lambda is not finite");
  const Mat H = ridge_system(p, lambda_domain);
  Eigen::LLT<Mat> llt(H);
  require(llt.info() == Eigen::Success, ErrorCode::kSingular,
          "X'X + lambda I is singular or indefinite at lambda = " + std::to_string(lambda_domain));
  return from_vec(llt.solve(ridge_rhs(p)));
}

Tensor ridge_br_jacobian(const RidgeProblem& p, double lambda_domain) {
  const Tensor w = ridge_best_response(p, lambda_domain);
  const Eigen::LLT<Mat> llt(ridge_system(p, lambda_domain));
  const double chain = p.domain_derivative(p.to_raw(lambda_domain));
  const Vec j = -llt.solve(to_vec(w)) * (p.penalty_factor() * chain);
  return from_mat(j);
}

Tensor stn_biased_fixed_point(const RidgeProblem& p, double lambda0_domain, const Tensor& theta, double sigma) {
  p.validate();
  require(p.transform == LambdaTransform::kIdentity, ErrorCode::kInapplicable,
          "the closed-form fixed point needs an identity lambda transform");
  require_vector(theta, p.m(), "theta");
  require(sigma >= 0.0 && std::isfinite(sigma), ErrorCode::kInvalidArgument, "sigma must be finite and >= 0");
  const double c = p.penalty_factor();
  const Mat H = ridge_system(p, lambda0_domain);
  Eigen::LLT<Mat> llt(H);
  require(llt.info() == Eigen::Success, ErrorCode::kSingular, "X'X + lambda0 I is singular");
  return from_vec(llt.solve(ridge_rhs(p) - c * sigma * sigma * to_vec(theta)));
}

double dropout_expected_loss(const Tensor& X, const Tensor& t, double drop_rate, const Tensor& w) {
  require(X.rank() == 2, ErrorCode::kShapeMismatch, "X must be a matrix");
  require_vector(t, X.rows(), "t");
  require_vector(w, X.cols(), "w");
  require(drop_rate >= 0.0 && drop_rate < 1.0, ErrorCode::kInvalidArgument, "drop rate must be in [0, 1)");
  const double q = 1.0 - drop_rate;
  const Mat Xm = to_mat(X);
  const Vec x = to_vec(w);
  const Vec r = q * (Xm * x) - to_vec(t);
  const Vec col_sq = Xm.cwiseAbs2().colwise().sum().transpose();
  const double var = q * (1.0 - q) * col_sq.dot(x.cwiseAbs2());
  return (r.squaredNorm() + var) / (2.0 * static_cast<double>(X.rows()));
}

double bilevel_outer_objective(const RidgeProblem& p, double lambda_raw) {
  return p.validation_loss(ridge_best_response(p, p.to_domain(lambda_raw)));
}

double bilevel_outer_grad(const RidgeProblem& p, double lambda_raw) {
  const double lam = p.to_domain(lambda_raw);
  const Vec w = to_vec(ridge_best_response(p, lam));
  const Mat Xv = to_mat(p.X_valid);
  const Vec gw = Xv.transpose() * (Xv * w - to_vec(p.t_valid)) / static_cast<double>(p.v());
  return to_vec(ridge_br_jacobian(p, lam)).dot(gw);
}

BilevelSolution bilevel_solve(const RidgeProblem& p, double lo, double hi, bool allow_boundary) {
  require(std::isfinite(lo) && std::isfinite(hi) && lo < hi, ErrorCode::kInvalidArgument,
          "bracket must satisfy lo < hi");
  p.validate();
  constexpr std::size_t kGrid = 1024;
  const auto at = [&](std::size_t i) { return lo + (hi - lo) * static_cast<double>(i) / (kGrid - 1); };
  std::size_t best = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<double> vals(kGrid);
  for (std::size_t i = 0; i < kGrid; ++i) {
    vals[i] = bilevel_outer_objective(p, at(i));
    if (vals[i] < best_val) {  // strict: the smallest lambda wins ties
      best_val = vals[i];
      best = i;
    }
  }
  if (best == 0 || best == kGrid - 1) {
    if (!allow_boundary) {
      std::ostringstream os;
      os.precision(12);
      os << "no interior minimum in [" << lo << ", " << hi << "]: L_V(lo) = " << vals.front()
         << ", L_V(hi) = " << vals.back();
      fail(ErrorCode::kInvalidArgument, os.str());
    }
    return {at(best), best_val, true};
  }

  double a = at(best - 1), b = at(best + 1);
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - g * (b - a), x2 = a + g * (b - a);
  double f1 = bilevel_outer_objective(p, x1), f2 = bilevel_outer_objective(p, x2);
  while (b - a > 1e-6) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - g * (b - a);
      f1 = bilevel_outer_objective(p, x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + g * (b - a);
      f2 = bilevel_outer_objective(p, x2);
    }
  }
  BilevelSolution out{0.5 * (a + b), 0.0, false};
  out.val_loss = bilevel_outer_objective(p, out.lambda_raw);
  if (best_val < out.val_loss) out = {at(best), best_val, false};
  return out;
}

Tensor implicit_jacobian(const Tensor& hess_ww, const Tensor& hess_wl) {
  const Mat H = to_mat(hess_ww);
  const Mat M = hess_wl.rank() == 1 ? Mat(to_vec(hess_wl)) : to_mat(hess_wl);
  require(M.rows() == H.rows(), ErrorCode::kShapeMismatch, "mixed Hessian rows must match the weight Hessian");
  const auto llt = detail::spd_factor(H, "weight Hessian");
  return from_mat(-llt.solve(M));
}

Tensor implicit_jacobian_check(const RidgeProblem& p, double lambda_domain, const Tensor& w) {
  p.validate();
  require_vector(w, p.m(), "w");
  const double n = static_cast<double>(p.n());
  const Mat H = ridge_system(p, lambda_domain) / n;
  const double chain = p.domain_derivative(p.to_raw(lambda_domain));
  const Vec M = to_vec(w) * (p.penalty_factor() * chain / n);
  return implicit_jacobian(from_mat(H), from_mat(M));
}

Tensor implicit_jacobian_check(const QuadraticProblem& p) {
  p.validate();
  return implicit_jacobian(p.A, p.B);
}

}  // namespace stn::oracles
