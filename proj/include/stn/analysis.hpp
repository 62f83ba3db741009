// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "stn/tensor.hpp"

namespace stn::analysis {

/// Kronecker product of two matrices.
Tensor kron(const Tensor& A, const Tensor& B);

/// Condition number (largest / smallest eigenvalue) of an SPD matrix.
double spd_condition(const Tensor& A);

struct KronCondition {
  double kappa_a = 0.0;
  double kappa_b = 0.0;
  double kappa_kron = 0.0;  // from the materialized product
};
KronCondition kron_condition(const Tensor& A, const Tensor& B);

/// One sample of the hypernetwork Gauss-Newton sum: homogeneous
/// hyperparameter vector lambda_hat (h + 1), network Jacobian J (k x m) and
/// output Hessian H_y (k x k).
struct GaussNewtonSample {
  Tensor lambda_hat;
  Tensor J;
  Tensor H_y;
};

/// Largest Gauss-Newton dimension materialized.
inline constexpr std::size_t kMaxGaussNewtonDim = 4096;

/// mean over samples of (lambda_hat lambda_hat') kron (J' H_y J).
Tensor hypernet_gauss_newton(const std::vector<GaussNewtonSample>& samples);

/// E[lambda_hat lambda_hat'] for lambda_hat ~ N(lambda_bar, diag(sigma^2)):
/// diag(sigma^2) + lambda_bar lambda_bar'.
struct SecondMoment {
  Tensor matrix;
  Tensor diagonal;  // sigma^2
  Tensor rank_one;  // lambda_bar lambda_bar'
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  double kappa = 0.0;
};
SecondMoment second_moment_decomposition(const Tensor& lambda_bar, const Tensor& sigma);

/// E[(lambda_hat, 1)(lambda_hat, 1)'] for lambda_hat ~ N(lambda_bar,
/// diag(sigma^2)): the input covariance seen by a linear hypernetwork with a
/// bias column. Pass lambda_bar = 0 for the centered form.
Tensor homogeneous_moment(const Tensor& lambda_bar, const Tensor& sigma);

struct ConditioningReport {
  double kappa_lambda = 0.0;  // E[lambda_hat lambda_hat']
  double kappa_gw = 0.0;      // weight-space Gauss-Newton
  double kappa_product = 0.0;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
};
ConditioningReport conditioning_report(const Tensor& lambda_moment, const Tensor& weight_gn);

/// Cosine of the angle between the training and validation gradients.
double gradient_alignment(const Tensor& g_train, const Tensor& g_valid);

/// -alpha (g_T . g_V) lambda: the lambda-dependent term of the hypergradient
/// after one uncentered inner step from Phi = 0.
Tensor predicted_spike_term(const Tensor& g_train, const Tensor& g_valid, const Tensor& lambda, double alpha);

}  // namespace stn::analysis
