// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace stn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. A rank-0 tensor holds one element.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  Tensor(Shape shape, std::vector<double> data);
  explicit Tensor(Shape shape, double fill = 0.0);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  /// Validating constructor for data that came from outside the library
  /// (files, C callers): rejects size mismatches and non-finite entries.
  static Tensor from_external(Shape shape, std::vector<double> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double item() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Eager tensor algebra. These back the reverse rules of the tape and are
// usable directly for oracle code.
Tensor map(const Tensor& a, const std::function<double(double)>& f);
Tensor zip(const Tensor& a, const Tensor& b, const std::function<double(double, double)>& f);
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& a);
Tensor operator-(const Tensor& a);

/// Shape produced by the limited broadcasting rule: equal shapes, a
/// one-element operand, or rank<=2 operands that differ only where one
/// side has extent 1 (row and column vectors).
Shape broadcast_shape(const Shape& a, const Shape& b);
/// Broadcasting elementwise combination under broadcast_shape.
Tensor broadcast_zip(const Tensor& a, const Tensor& b, const std::function<double(double, double)>& f);
/// Sums a broadcast result back down to `target` (the adjoint of broadcasting).
Tensor reduce_to(const Tensor& g, const Shape& target);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor matvec(const Tensor& m, const Tensor& v);
Tensor outer(const Tensor& a, const Tensor& b);
double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);
double norm(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor row_scale(const Tensor& v, const Tensor& m);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);
Tensor identity(std::size_t n);

/// Valid, unit-stride cross-correlation. input (N,C,H,W), kernels (O,C,K,K),
/// bias (O) or empty -> (N,O,H-K+1,W-K+1).
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor* bias);
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& kernels, const Shape& input_shape);
Tensor conv2d_grad_kernels(const Tensor& grad_out, const Tensor& input, const Shape& kernel_shape);

}  // namespace stn
