// SPDX-License-Identifier: Apache-2.0
#include "stn/tensor.hpp"

#include <cmath>
#include <sstream>

#include "stn/error.hpp"

namespace stn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) require(d > 0, ErrorCode::kShapeMismatch, "tensor extents must be positive, got " + shape_str(shape_));
  require(data_.size() == shape_numel(shape_), ErrorCode::kShapeMismatch,
          "tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, double fill) : Tensor(shape, std::vector<double>(shape_numel(shape), fill)) {}

Tensor Tensor::vector(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor(Shape{rows, cols}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> v;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    require(r.size() == cols, ErrorCode::kShapeMismatch, "ragged matrix literal");
    v.insert(v.end(), r.begin(), r.end());
  }
  return matrix(rows.size(), cols, std::move(v));
}

Tensor Tensor::from_external(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  for (std::size_t i = 0; i < t.numel(); ++i)
    require(std::isfinite(t.data_[i]), ErrorCode::kNonFinite, "non-finite value at flat index " + std::to_string(i));
  return t;
}

std::size_t Tensor::rows() const {
  require(rank() == 2, ErrorCode::kShapeMismatch, "expected a matrix, got " + shape_str(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require(rank() == 2, ErrorCode::kShapeMismatch, "expected a matrix, got " + shape_str(shape_));
  return shape_[1];
}

double Tensor::item() const {
  require(numel() == 1, ErrorCode::kShapeMismatch, "item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_numel(shape) == numel(), ErrorCode::kShapeMismatch,
          "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor map(const Tensor& a, const std::function<double(double)>& f) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
  return Tensor(a.shape(), std::move(out));
}

Tensor zip(const Tensor& a, const Tensor& b, const std::function<double(double, double)>& f) {
  require(a.same_shape(b), ErrorCode::kShapeMismatch,
          "elementwise shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  return Tensor(a.shape(), std::move(out));
}

namespace {

struct View2 {
  std::size_t r, c;
};

View2 view2(const Shape& s) {
  if (s.empty()) return {1, 1};
  if (s.size() == 1) return {1, s[0]};
  return {s[0], s[1]};
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  const auto na = shape_numel(a), nb = shape_numel(b);
  if (nb == 1 && (na != 1 || a.size() >= b.size())) return a;
  if (na == 1) return b;
  if (a.size() <= 2 && b.size() <= 2) {
    auto va = view2(a), vb = view2(b);
    auto pick = [](std::size_t x, std::size_t y, bool& ok) {
      if (x == y) return x;
      if (x == 1) return y;
      if (y == 1) return x;
      ok = false;
      return x;
    };
    bool ok = true;
    Shape out{pick(va.r, vb.r, ok), pick(va.c, vb.c, ok)};
    if (ok) {
      if (a.size() < 2 && b.size() < 2) return Shape{out[1]};
      return out;
    }
  }
  fail(ErrorCode::kShapeMismatch, "shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
}

Tensor broadcast_zip(const Tensor& a, const Tensor& b, const std::function<double(double, double)>& f) {
  if (a.same_shape(b)) return zip(a, b, f);
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor out(out_shape);
  if (a.numel() == 1 || b.numel() == 1) {
    const bool a_scalar = a.numel() == 1;
    for (std::size_t i = 0; i < out.numel(); ++i)
      out[i] = a_scalar ? f(a[0], b[i]) : f(a[i], b[0]);
    return out;
  }
  auto vo = view2(out_shape), va = view2(a.shape()), vb = view2(b.shape());
  for (std::size_t i = 0; i < vo.r; ++i)
    for (std::size_t j = 0; j < vo.c; ++j) {
      double x = a[(va.r == 1 ? 0 : i) * va.c + (va.c == 1 ? 0 : j)];
      double y = b[(vb.r == 1 ? 0 : i) * vb.c + (vb.c == 1 ? 0 : j)];
      out[i * vo.c + j] = f(x, y);
    }
  return out;
}

Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (shape_numel(target) == 1) return Tensor(target, std::vector<double>{sum(g)});
  if (shape_numel(target) == g.numel()) return g.reshaped(target);
  auto vg = view2(g.shape()), vt = view2(target);
  require(g.rank() <= 2 && target.size() <= 2, ErrorCode::kShapeMismatch,
          "cannot reduce " + shape_str(g.shape()) + " to " + shape_str(target));
  std::vector<double> out(vt.r * vt.c, 0.0);
  for (std::size_t i = 0; i < vg.r; ++i)
    for (std::size_t j = 0; j < vg.c; ++j)
      out[(vt.r == 1 ? 0 : i) * vt.c + (vt.c == 1 ? 0 : j)] += g[i * vg.c + j];
  return Tensor(target, std::move(out));
}

Tensor operator+(const Tensor& a, const Tensor& b) { return broadcast_zip(a, b, [](double x, double y) { return x + y; }); }
Tensor operator-(const Tensor& a, const Tensor& b) { return broadcast_zip(a, b, [](double x, double y) { return x - y; }); }
Tensor operator*(const Tensor& a, const Tensor& b) { return broadcast_zip(a, b, [](double x, double y) { return x * y; }); }
Tensor operator/(const Tensor& a, const Tensor& b) { return broadcast_zip(a, b, [](double x, double y) { return x / y; }); }
Tensor operator*(double s, const Tensor& a) { return map(a, [s](double x) { return s * x; }); }
Tensor operator-(const Tensor& a) { return map(a, [](double x) { return -x; }); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, ErrorCode::kShapeMismatch,
          "matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
    }
  return Tensor(Shape{m, n}, std::move(out));
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return Tensor(Shape{n, m}, std::move(out));
}

Tensor matvec(const Tensor& m, const Tensor& v) {
  require(v.rank() == 1, ErrorCode::kShapeMismatch, "matvec expects a vector, got " + shape_str(v.shape()));
  return matmul(m, v.reshaped({v.numel(), 1})).reshaped({m.rows()});
}

Tensor outer(const Tensor& a, const Tensor& b) {
  return matmul(a.reshaped({a.numel(), 1}), b.reshaped({1, b.numel()}));
}

double dot(const Tensor& a, const Tensor& b) {
  require(a.numel() == b.numel(), ErrorCode::kShapeMismatch, "dot of unequal lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  const std::size_t m = a.rows(), n = a.cols();
  require(axis < 2, ErrorCode::kInvalidArgument, "sum_axis axis must be 0 or 1");
  if (axis == 0) {
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
    return Tensor(Shape{1, n}, std::move(out));
  }
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a[i * n + j];
  return Tensor(Shape{m, 1}, std::move(out));
}

Tensor row_scale(const Tensor& v, const Tensor& m) {
  const std::size_t r = m.rows(), c = m.cols();
  require(v.numel() == r, ErrorCode::kShapeMismatch,
          "row_scale needs one scale per row: " + shape_str(v.shape()) + " vs " + shape_str(m.shape()));
  Tensor out(m.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = v[i] * m[i * c + j];
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "concat of zero tensors");
  const auto& first = parts.front().shape();
  require(axis < first.size(), ErrorCode::kInvalidArgument, "concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), ErrorCode::kShapeMismatch, "concat rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis)
        require(p.dim(d) == first[d], ErrorCode::kShapeMismatch,
                "concat extents differ off-axis: " + shape_str(p.shape()) + " vs " + shape_str(first));
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer_n = 1, inner_n = 1;
  for (std::size_t d = 0; d < axis; ++d) outer_n *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner_n *= first[d];
  std::vector<double> out;
  out.reserve(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer_n; ++o)
    for (const auto& p : parts) {
      const std::size_t chunk = p.dim(axis) * inner_n;
      auto d = p.data();
      out.insert(out.end(), d.begin() + o * chunk, d.begin() + (o + 1) * chunk);
    }
  return Tensor(std::move(out_shape), std::move(out));
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  require(axis < a.rank(), ErrorCode::kInvalidArgument, "slice axis out of range");
  require(len > 0 && start + len <= a.dim(axis), ErrorCode::kShapeMismatch,
          "slice [" + std::to_string(start) + ", " + std::to_string(start + len) + ") out of range for " +
              shape_str(a.shape()));
  std::size_t outer_n = 1, inner_n = 1;
  for (std::size_t d = 0; d < axis; ++d) outer_n *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner_n *= a.dim(d);
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<double> out;
  out.reserve(shape_numel(out_shape));
  auto d = a.data();
  for (std::size_t o = 0; o < outer_n; ++o) {
    auto base = d.begin() + (o * a.dim(axis) + start) * inner_n;
    out.insert(out.end(), base, base + len * inner_n);
  }
  return Tensor(std::move(out_shape), std::move(out));
}

Tensor identity(std::size_t n) {
  Tensor out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = 1.0;
  return out;
}

namespace {

struct ConvDims {
  std::size_t n, c, h, w, o, k, oh, ow;
};

ConvDims conv_dims(const Shape& input, const Shape& kernels) {
  require(input.size() == 4 && kernels.size() == 4, ErrorCode::kShapeMismatch,
          "conv2d expects (N,C,H,W) input and (O,C,K,K) kernels");
  require(kernels[1] == input[1], ErrorCode::kShapeMismatch, "conv2d channel mismatch");
  require(kernels[2] == kernels[3], ErrorCode::kShapeMismatch, "conv2d kernels must be square");
  require(kernels[2] <= input[2] && kernels[2] <= input[3], ErrorCode::kShapeMismatch, "conv2d kernel larger than input");
  ConvDims d{input[0], input[1], input[2], input[3], kernels[0], kernels[2], 0, 0};
  d.oh = d.h - d.k + 1;
  d.ow = d.w - d.k + 1;
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor* bias) {
  const auto d = conv_dims(input.shape(), kernels.shape());
  if (bias) require(bias->numel() == d.o, ErrorCode::kShapeMismatch, "conv2d bias length must equal output channels");
  Tensor out(Shape{d.n, d.o, d.oh, d.ow});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t o = 0; o < d.o; ++o)
      for (std::size_t i = 0; i < d.oh; ++i)
        for (std::size_t j = 0; j < d.ow; ++j) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (std::size_t c = 0; c < d.c; ++c)
            for (std::size_t p = 0; p < d.k; ++p)
              for (std::size_t q = 0; q < d.k; ++q)
                acc += input[((n * d.c + c) * d.h + i + p) * d.w + j + q] * kernels[((o * d.c + c) * d.k + p) * d.k + q];
          out[((n * d.o + o) * d.oh + i) * d.ow + j] = acc;
        }
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& kernels, const Shape& input_shape) {
  const auto d = conv_dims(input_shape, kernels.shape());
  Tensor gin(input_shape);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t o = 0; o < d.o; ++o)
      for (std::size_t i = 0; i < d.oh; ++i)
        for (std::size_t j = 0; j < d.ow; ++j) {
          const double g = grad_out[((n * d.o + o) * d.oh + i) * d.ow + j];
          for (std::size_t c = 0; c < d.c; ++c)
            for (std::size_t p = 0; p < d.k; ++p)
              for (std::size_t q = 0; q < d.k; ++q)
                gin[((n * d.c + c) * d.h + i + p) * d.w + j + q] += g * kernels[((o * d.c + c) * d.k + p) * d.k + q];
        }
  return gin;
}

Tensor conv2d_grad_kernels(const Tensor& grad_out, const Tensor& input, const Shape& kernel_shape) {
  const auto d = conv_dims(input.shape(), kernel_shape);
  Tensor gk(kernel_shape);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t o = 0; o < d.o; ++o)
      for (std::size_t i = 0; i < d.oh; ++i)
        for (std::size_t j = 0; j < d.ow; ++j) {
          const double g = grad_out[((n * d.o + o) * d.oh + i) * d.ow + j];
          for (std::size_t c = 0; c < d.c; ++c)
            for (std::size_t p = 0; p < d.k; ++p)
              for (std::size_t q = 0; q < d.k; ++q)
                gk[((o * d.c + c) * d.k + p) * d.k + q] += g * input[((n * d.c + c) * d.h + i + p) * d.w + j + q];
        }
  return gk;
}

}  // namespace stn
