// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "stn/tensor.hpp"

namespace stn::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while
/// its tape is alive.
class Var {
 public:
  Var() = default;
  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,
  kAddScalar,
  kExp,
  kLog,
  kTanh,
  kRelu,
  kSigmoid,
  kSoftplus,
  kSquare,
  kMatMul,
  kTranspose,
  kSum,
  kSumAxis,
  kRowScale,
  kConcat,
  kSlice,
  kReshape,
  kConv2d,
};

std::string_view op_name(Op op);

/// Gradients of a scalar output with respect to requires_grad leaves,
/// keyed by node id.
class Gradients {
 public:
  /// Gradient for `v`; zeros of v's shape when v did not influence the output.
  Tensor of(Var v) const;
  bool contains(Var v) const { return grads_.count(v.id()) != 0; }
  const std::map<int, Tensor>& by_id() const { return grads_; }

 private:
  friend class Tape;
  std::map<int, Tensor> grads_;
};

struct NodeAttrs {
  double scalar = 0.0;
  std::size_t axis = 0;
  std::size_t start = 0;
  std::size_t len = 0;
  Shape shape;
};

/// Dynamic recording of a computation. Every primitive stores its value
/// eagerly, so a recording can be replayed backward (reverse mode) or
/// pushed forward along tangents (forward mode). Forward-mode tangents are
/// themselves recorded, which makes them differentiable in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a one-element output.
  Gradients backward(Var output) const;

  /// Directional derivative of `output` along `seeds` (pairs of input var and
  /// tangent var of the same shape). Inputs not seeded have zero tangent.
  /// The returned tangent lives on this tape.
  Var jvp(Var output, std::span<const std::pair<Var, Var>> seeds);

  using Attrs = NodeAttrs;
  Var push(Op op, std::vector<int> inputs, Tensor value, Attrs attrs = Attrs());

 private:
  struct Node {
    Op op;
    std::vector<int> inputs;
    Tensor value;
    Attrs attrs;
    bool requires_grad;
  };
  Var var(int id) { return Var(this, id); }
  void check(Var v) const;

  std::vector<Node> nodes_;
};

// Primitives. Binary elementwise ops broadcast scalars and row/column
// vectors only.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var square(Var a);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var sum(Var a);
/// Sum of a matrix over `axis`, keeping the reduced extent as 1.
Var sum(Var a, std::size_t axis);
/// Multiplies row i of matrix m by v[i].
Var row_scale(Var v, Var m);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t start, std::size_t len);
Var reshape(Var a, Shape shape);
/// Valid, unit-stride 2-D cross-correlation; `bias` may be an invalid Var.
Var conv2d(Var input, Var kernels, Var bias = {});

// Composites.
Var mean(Var a);
Var mean(Var a, std::size_t axis);
Var matvec(Var m, Var v);
Var dot(Var a, Var b);
Var sum_squares(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }

using Computation = std::function<Var(Tape&, std::span<const Var>)>;

struct Recording {
  std::unique_ptr<Tape> tape;
  std::vector<Var> inputs;
  Var output;
};

/// Records `fn` applied to fresh leaves holding `inputs`.
Recording record(const Computation& fn, const std::vector<Tensor>& inputs, bool requires_grad = true);

/// Gradient of a scalar computation with respect to each input.
std::vector<Tensor> gradient(const Computation& fn, const std::vector<Tensor>& inputs);

struct DualTensor {
  Tensor primal;
  Tensor tangent;
};

DualTensor jvp(const Computation& fn, const std::vector<Tensor>& primals, const std::vector<Tensor>& tangents);

}  // namespace stn::ad
