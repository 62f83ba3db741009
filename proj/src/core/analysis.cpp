// SPDX-License-Identifier: Apache-2.0
#include "stn/analysis.hpp"

#include <cmath>

#include "eigen_bridge.hpp"
#include "stn/error.hpp"

namespace stn::analysis {

using detail::Mat;
using detail::Vec;
using detail::from_mat;
using detail::to_mat;
using detail::to_vec;

namespace {

struct Extremes {
  double lo, hi;
};

Extremes spd_extremes(const Mat& m, const std::string& what) {
  require(m.rows() > 0 && detail::is_symmetric(m), ErrorCode::kNotPositiveDefinite, what + " is not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(m, Eigen::EigenvaluesOnly);
  require(es.info() == Eigen::Success, ErrorCode::kSingular, "eigensolver failed for " + what);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  require(lo > 0.0, ErrorCode::kNotPositiveDefinite, what + " is not positive definite");
  return {lo, hi};
}

Mat kron_mat(const Mat& A, const Mat& B) {
  Mat out(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return out;
}

}  // namespace

Tensor kron(const Tensor& A, const Tensor& B) { return from_mat(kron_mat(to_mat(A), to_mat(B))); }

double spd_condition(const Tensor& A) {
  const auto e = spd_extremes(to_mat(A), "matrix");
  return e.hi / e.lo;
}

KronCondition kron_condition(const Tensor& A, const Tensor& B) {
  const Mat a = to_mat(A), b = to_mat(B);
  const auto ea = spd_extremes(a, "A"), eb = spd_extremes(b, "B");
  const auto ek = spd_extremes(kron_mat(a, b), "A kron B");
  return {ea.hi / ea.lo, eb.hi / eb.lo, ek.hi / ek.lo};
}

Tensor hypernet_gauss_newton(const std::vector<GaussNewtonSample>& samples) {
  require(!samples.empty(), ErrorCode::kInvalidArgument, "no Gauss-Newton samples");
  const std::size_t hp1 = samples[0].lambda_hat.numel();
  const std::size_t m = samples[0].J.cols();
  require(hp1 * m <= kMaxGaussNewtonDim, ErrorCode::kInvalidArgument,
          "Gauss-Newton dimension " + std::to_string(hp1 * m) + " exceeds " + std::to_string(kMaxGaussNewtonDim));
  Mat G = Mat::Zero(hp1 * m, hp1 * m);
  for (const auto& s : samples) {
    require(s.lambda_hat.numel() == hp1 && s.J.rank() == 2 && s.J.cols() == m, ErrorCode::kShapeMismatch,
            "inconsistent Gauss-Newton sample shapes");
    require(s.H_y.rank() == 2 && s.H_y.rows() == s.J.rows() && s.H_y.cols() == s.J.rows(),
            ErrorCode::kShapeMismatch, "H_y must be (k, k) with k the Jacobian rows");
    const Vec l = to_vec(s.lambda_hat);
    const Mat J = to_mat(s.J);
    G += kron_mat(l * l.transpose(), J.transpose() * to_mat(s.H_y) * J);
  }
  return from_mat(G / static_cast<double>(samples.size()));
}

SecondMoment second_moment_decomposition(const Tensor& lambda_bar, const Tensor& sigma) {
  require(lambda_bar.numel() == sigma.numel() && lambda_bar.numel() > 0, ErrorCode::kShapeMismatch,
          "lambda_bar and sigma must have the same non-zero length");
  const Vec l = to_vec(lambda_bar), s = to_vec(sigma);
  require(l.allFinite() && s.allFinite(), ErrorCode::kNonFinite, "non-finite input");
  require((s.array() > 0.0).all(), ErrorCode::kInvalidArgument, "sigma must be positive");
  const Mat diag = s.cwiseAbs2().asDiagonal();
  const Mat r1 = l * l.transpose();
  SecondMoment out;
  out.diagonal = from_mat(diag);
  out.rank_one = from_mat(r1);
  out.matrix = from_mat(diag + r1);
  const auto e = spd_extremes(diag + r1, "second moment");
  out.lambda_min = e.lo;
  out.lambda_max = e.hi;
  out.kappa = e.hi / e.lo;
  return out;
}

Tensor homogeneous_moment(const Tensor& lambda_bar, const Tensor& sigma) {
  require(lambda_bar.numel() == sigma.numel(), ErrorCode::kShapeMismatch, "lambda_bar and sigma lengths differ");
  const std::size_t h = lambda_bar.numel();
  Vec l(h + 1);
  for (std::size_t i = 0; i < h; ++i) l(i) = lambda_bar[i];
  l(h) = 1.0;
  Mat m = l * l.transpose();
  for (std::size_t i = 0; i < h; ++i) m(i, i) += sigma[i] * sigma[i];
  return from_mat(m);
}

ConditioningReport conditioning_report(const Tensor& lambda_moment, const Tensor& weight_gn) {
  const auto el = spd_extremes(to_mat(lambda_moment), "lambda second moment");
  const auto ew = spd_extremes(to_mat(weight_gn), "weight Gauss-Newton");
  ConditioningReport r;
  r.kappa_lambda = el.hi / el.lo;
  r.kappa_gw = ew.hi / ew.lo;
  r.kappa_product = r.kappa_lambda * r.kappa_gw;
  r.lambda_min = el.lo;
  r.lambda_max = el.hi;
  return r;
}

double gradient_alignment(const Tensor& g_train, const Tensor& g_valid) {
  require(g_train.numel() == g_valid.numel(), ErrorCode::kShapeMismatch, "gradient lengths differ");
  const double nt = norm(g_train), nv = norm(g_valid);
  require(nt > 0.0 && nv > 0.0, ErrorCode::kInvalidArgument, "alignment is undefined for a zero gradient");
  return dot(g_train.reshaped({g_train.numel()}), g_valid.reshaped({g_valid.numel()})) / (nt * nv);
}

Tensor predicted_spike_term(const Tensor& g_train, const Tensor& g_valid, const Tensor& lambda, double alpha) {
  require(g_train.numel() == g_valid.numel(), ErrorCode::kShapeMismatch, "gradient lengths differ");
  const double gg = dot(g_train.reshaped({g_train.numel()}), g_valid.reshaped({g_valid.numel()}));
  return (-alpha * gg) * lambda;
}

}  // namespace stn::analysis
