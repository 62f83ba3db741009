// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include "stn/error.hpp"
#include "stn/tensor.hpp"

namespace stn::detail {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline Mat to_mat(const Tensor& t) {
  require(t.rank() == 2, ErrorCode::kShapeMismatch, "expected a matrix, got shape " + shape_str(t.shape()));
  Mat m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t.at(r, c);
  return m;
}

inline Vec to_vec(const Tensor& t) {
  Vec v(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) v(i) = t[i];
  return v;
}

inline Tensor from_mat(const Mat& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(r, c) = m(r, c);
  return t;
}

inline Tensor from_vec(const Vec& v) {
  Tensor t(Shape{static_cast<std::size_t>(v.size())});
  for (Eigen::Index i = 0; i < v.size(); ++i) t[i] = v(i);
  return t;
}

inline bool is_symmetric(const Mat& m, double tol = 1e-10) {
  if (m.rows() != m.cols()) return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

/// Cholesky factor of an SPD matrix, or kNotPositiveDefinite.
inline Eigen::LLT<Mat> spd_factor(const Mat& m, const std::string& what) {
  require(is_symmetric(m), ErrorCode::kNotPositiveDefinite, what + " is not symmetric");
  Eigen::LLT<Mat> llt(m);
  require(llt.info() == Eigen::Success, ErrorCode::kNotPositiveDefinite, what + " is not positive definite");
  return llt;
}

}  // namespace stn::detail
