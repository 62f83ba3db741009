// SPDX-License-Identifier: Apache-2.0
#include "stn/autodiff.hpp"

#include <cmath>
#include <optional>

#include "stn/error.hpp"

namespace stn::ad {

namespace {

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

Tape& same_tape(Var a, Var b) {
  require(a.valid() && b.valid(), ErrorCode::kInvalidArgument, "operation on an unset variable");
  require(&a.tape() == &b.tape(), ErrorCode::kInvalidArgument, "variables belong to different recordings");
  return a.tape();
}

Tensor unslice(const Tensor& g, const Shape& in_shape, std::size_t axis, std::size_t start) {
  Tensor out(in_shape);
  std::size_t outer_n = 1, inner_n = 1;
  for (std::size_t d = 0; d < axis; ++d) outer_n *= in_shape[d];
  for (std::size_t d = axis + 1; d < in_shape.size(); ++d) inner_n *= in_shape[d];
  const std::size_t len = g.dim(axis);
  for (std::size_t o = 0; o < outer_n; ++o)
    for (std::size_t k = 0; k < len * inner_n; ++k)
      out[(o * in_shape[axis] + start) * inner_n + k] = g[o * len * inner_n + k];
  return out;
}

Tensor conv_bias_grad(const Tensor& g) {
  const std::size_t n = g.dim(0), o = g.dim(1), hw = g.dim(2) * g.dim(3);
  Tensor gb(Shape{o});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t c = 0; c < o; ++c)
      for (std::size_t k = 0; k < hw; ++k) gb[c] += g[(a * o + c) * hw + k];
  return gb;
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftplus: return "softplus";
    case Op::kSquare: return "square";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kSum: return "sum";
    case Op::kSumAxis: return "sum_axis";
    case Op::kRowScale: return "row_scale";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kReshape: return "reshape";
    case Op::kConv2d: return "conv2d";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  require(valid(), ErrorCode::kInvalidArgument, "value() on an unset variable");
  return tape_->value(*this);
}

Tensor Gradients::of(Var v) const {
  auto it = grads_.find(v.id());
  if (it != grads_.end()) return it->second;
  return Tensor::zeros(v.shape());
}

void Tape::check(Var v) const {
  require(v.valid() && &v.tape() == this && v.id() >= 0 && static_cast<std::size_t>(v.id()) < nodes_.size(),
          ErrorCode::kInvalidArgument, "variable does not belong to this recording");
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{Op::kLeaf, {}, std::move(value), {}, requires_grad});
  return var(static_cast<int>(nodes_.size()) - 1);
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id()].value;
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id()].requires_grad;
}

Var Tape::push(Op op, std::vector<int> inputs, Tensor value, Attrs attrs) {
  bool rg = false;
  for (int i : inputs) rg = rg || nodes_[i].requires_grad;
  nodes_.push_back(Node{op, std::move(inputs), std::move(value), std::move(attrs), rg});
  return var(static_cast<int>(nodes_.size()) - 1);
}

Gradients Tape::backward(Var output) const {
  check(output);
  require(value(output).numel() == 1, ErrorCode::kShapeMismatch,
          "backward needs a scalar output, got shape " + shape_str(value(output).shape()));
  Gradients result;
  std::vector<std::optional<Tensor>> adj(static_cast<std::size_t>(output.id()) + 1);
  adj[output.id()] = Tensor(value(output).shape(), 1.0);

  auto accumulate = [&](int id, Tensor g) {
    if (!nodes_[id].requires_grad) return;
    auto& slot = adj[id];
    if (slot) {
      auto d = slot->data();
      for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k];
    } else {
      slot = std::move(g);
    }
  };

  for (int i = output.id(); i >= 0; --i) {
    if (!adj[i] || !nodes_[i].requires_grad) continue;
    const Node& n = nodes_[i];
    const Tensor& g = *adj[i];
    const Tensor& y = n.value;
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
    switch (n.op) {
      case Op::kLeaf: result.grads_.emplace(i, g); break;
      case Op::kAdd:
        accumulate(n.inputs[0], reduce_to(g, in(0).shape()));
        accumulate(n.inputs[1], reduce_to(g, in(1).shape()));
        break;
      case Op::kSub:
        accumulate(n.inputs[0], reduce_to(g, in(0).shape()));
        accumulate(n.inputs[1], reduce_to(-g, in(1).shape()));
        break;
      case Op::kMul:
        accumulate(n.inputs[0], reduce_to(g * in(1), in(0).shape()));
        accumulate(n.inputs[1], reduce_to(g * in(0), in(1).shape()));
        break;
      case Op::kDiv:
        accumulate(n.inputs[0], reduce_to(g / in(1), in(0).shape()));
        accumulate(n.inputs[1], reduce_to(-(g * y) / in(1), in(1).shape()));
        break;
      case Op::kNeg: accumulate(n.inputs[0], -g); break;
      case Op::kScale: accumulate(n.inputs[0], n.attrs.scalar * g); break;
      case Op::kAddScalar: accumulate(n.inputs[0], g); break;
      case Op::kExp: accumulate(n.inputs[0], g * y); break;
      case Op::kLog: accumulate(n.inputs[0], g / in(0)); break;
      case Op::kTanh: accumulate(n.inputs[0], zip(g, y, [](double gg, double yy) { return gg * (1.0 - yy * yy); })); break;
      case Op::kRelu: accumulate(n.inputs[0], zip(g, in(0), [](double gg, double x) { return x > 0 ? gg : 0.0; })); break;
      case Op::kSigmoid: accumulate(n.inputs[0], zip(g, y, [](double gg, double s) { return gg * s * (1.0 - s); })); break;
      case Op::kSoftplus:
        accumulate(n.inputs[0], zip(g, in(0), [](double gg, double x) { return gg * sigmoid_scalar(x); }));
        break;
      case Op::kSquare: accumulate(n.inputs[0], zip(g, in(0), [](double gg, double x) { return 2.0 * x * gg; })); break;
      case Op::kMatMul:
        accumulate(n.inputs[0], stn::matmul(g, stn::transpose(in(1))));
        accumulate(n.inputs[1], stn::matmul(stn::transpose(in(0)), g));
        break;
      case Op::kTranspose: accumulate(n.inputs[0], stn::transpose(g)); break;
      case Op::kSum: accumulate(n.inputs[0], Tensor(in(0).shape(), g.item())); break;
      case Op::kSumAxis: accumulate(n.inputs[0], Tensor::zeros(in(0).shape()) + g); break;
      case Op::kRowScale: {
        const Tensor& v = in(0);
        const Tensor& m = in(1);
        accumulate(n.inputs[0], stn::sum_axis(g * m, 1).reshaped(v.shape()));
        accumulate(n.inputs[1], stn::row_scale(v, g));
        break;
      }
      case Op::kConcat: {
        std::size_t offset = 0;
        for (int id : n.inputs) {
          const std::size_t len = nodes_[id].value.dim(n.attrs.axis);
          accumulate(id, stn::slice(g, n.attrs.axis, offset, len));
          offset += len;
        }
        break;
      }
      case Op::kSlice: accumulate(n.inputs[0], unslice(g, in(0).shape(), n.attrs.axis, n.attrs.start)); break;
      case Op::kReshape: accumulate(n.inputs[0], g.reshaped(in(0).shape())); break;
      case Op::kConv2d:
        accumulate(n.inputs[0], conv2d_grad_input(g, in(1), in(0).shape()));
        accumulate(n.inputs[1], conv2d_grad_kernels(g, in(0), in(1).shape()));
        if (n.inputs.size() > 2) accumulate(n.inputs[2], conv_bias_grad(g));
        break;
      default: fail(ErrorCode::kInvalidArgument, "no reverse rule for primitive " + std::string(op_name(n.op)));
    }
  }

  for (std::size_t i = 0; i < adj.size(); ++i)
    if (nodes_[i].op == Op::kLeaf && nodes_[i].requires_grad && !result.grads_.count(static_cast<int>(i)))
      result.grads_.emplace(static_cast<int>(i), Tensor::zeros(nodes_[i].value.shape()));
  return result;
}

Var Tape::jvp(Var output, std::span<const std::pair<Var, Var>> seeds) {
  check(output);
  std::map<int, Var> tangent;
  int first = output.id();
  for (const auto& [x, t] : seeds) {
    check(x);
    check(t);
    require(value(x).shape() == value(t).shape(), ErrorCode::kShapeMismatch,
            "tangent shape " + shape_str(value(t).shape()) + " does not match primal " + shape_str(value(x).shape()));
    tangent[x.id()] = t;
    first = std::min(first, x.id());
  }
  auto expand = [this](Var t, const Shape& shape) {
    if (value(t).shape() == shape) return t;
    return add(t, constant(Tensor::zeros(shape)));
  };

  const int last = output.id();
  for (int i = first; i <= last; ++i) {
    if (tangent.count(i)) continue;
    const Op op = nodes_[i].op;
    if (op == Op::kLeaf) continue;
    const std::vector<int> inputs = nodes_[i].inputs;
    const Attrs attrs = nodes_[i].attrs;
    const Shape out_shape = nodes_[i].value.shape();
    std::vector<std::optional<Var>> t(inputs.size());
    bool any = false;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      auto it = tangent.find(inputs[k]);
      if (it != tangent.end()) {
        t[k] = it->second;
        any = true;
      }
    }
    if (!any) continue;
    Var y = var(i);
    auto x = [&](std::size_t k) { return var(inputs[k]); };
    Var r;
    switch (op) {
      case Op::kAdd:
        r = t[0] && t[1] ? add(*t[0], *t[1]) : expand(t[0] ? *t[0] : *t[1], out_shape);
        break;
      case Op::kSub:
        if (t[0] && t[1]) r = sub(*t[0], *t[1]);
        else r = t[0] ? expand(*t[0], out_shape) : expand(neg(*t[1]), out_shape);
        break;
      case Op::kMul:
        if (t[0] && t[1]) r = add(mul(*t[0], x(1)), mul(x(0), *t[1]));
        else r = t[0] ? mul(*t[0], x(1)) : mul(x(0), *t[1]);
        break;
      case Op::kDiv:
        if (t[0] && t[1]) r = div(sub(*t[0], mul(y, *t[1])), x(1));
        else r = t[0] ? div(*t[0], x(1)) : neg(div(mul(y, *t[1]), x(1)));
        break;
      case Op::kNeg: r = neg(*t[0]); break;
      case Op::kScale: r = scale(*t[0], attrs.scalar); break;
      case Op::kAddScalar: r = *t[0]; break;
      case Op::kExp: r = mul(*t[0], y); break;
      case Op::kLog: r = div(*t[0], x(0)); break;
      case Op::kTanh: r = sub(*t[0], mul(*t[0], square(y))); break;
      case Op::kRelu:
        r = mul(*t[0], constant(map(value(x(0)), [](double v) { return v > 0 ? 1.0 : 0.0; })));
        break;
      case Op::kSigmoid: r = mul(*t[0], sub(y, square(y))); break;
      case Op::kSoftplus: r = mul(*t[0], sigmoid(x(0))); break;
      case Op::kSquare: r = mul(scale(x(0), 2.0), *t[0]); break;
      case Op::kMatMul:
        if (t[0] && t[1]) r = add(matmul(*t[0], x(1)), matmul(x(0), *t[1]));
        else r = t[0] ? matmul(*t[0], x(1)) : matmul(x(0), *t[1]);
        break;
      case Op::kTranspose: r = transpose(*t[0]); break;
      case Op::kSum: r = sum(*t[0]); break;
      case Op::kSumAxis: r = sum(*t[0], attrs.axis); break;
      case Op::kRowScale:
        if (t[0] && t[1]) r = add(row_scale(*t[0], x(1)), row_scale(x(0), *t[1]));
        else r = t[0] ? row_scale(*t[0], x(1)) : row_scale(x(0), *t[1]);
        break;
      case Op::kConcat: {
        std::vector<Var> parts;
        for (std::size_t k = 0; k < inputs.size(); ++k)
          parts.push_back(t[k] ? *t[k] : constant(Tensor::zeros(value(x(k)).shape())));
        r = concat(parts, attrs.axis);
        break;
      }
      case Op::kSlice: r = slice(*t[0], attrs.axis, attrs.start, attrs.len); break;
      case Op::kReshape: r = reshape(*t[0], attrs.shape); break;
      case Op::kConv2d: {
        const bool has_bias = inputs.size() > 2;
        std::optional<Var> part;
        if (t[0]) part = conv2d(*t[0], x(1));
        const bool kernel_or_bias = t[1] || (has_bias && t[2]);
        if (kernel_or_bias) {
          Var tk = t[1] ? *t[1] : constant(Tensor::zeros(value(x(1)).shape()));
          Var tb = has_bias && t[2] ? *t[2] : Var{};
          Var q = conv2d(x(0), tk, tb);
          part = part ? add(*part, q) : q;
        }
        r = *part;
        break;
      }
      default: fail(ErrorCode::kInvalidArgument, "no forward rule for primitive " + std::string(op_name(op)));
    }
    tangent[i] = r;
  }
  auto it = tangent.find(last);
  if (it != tangent.end()) return it->second;
  return constant(Tensor::zeros(value(output).shape()));
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.push(Op::kAdd, {a.id(), b.id()}, a.value() + b.value());
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.push(Op::kSub, {a.id(), b.id()}, a.value() - b.value());
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.push(Op::kMul, {a.id(), b.id()}, a.value() * b.value());
}

Var div(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.push(Op::kDiv, {a.id(), b.id()}, a.value() / b.value());
}

Var neg(Var a) { return a.tape().push(Op::kNeg, {a.id()}, -a.value()); }

Var scale(Var a, double s) {
  Tape::Attrs at;
  at.scalar = s;
  return a.tape().push(Op::kScale, {a.id()}, s * a.value(), at);
}

Var add_scalar(Var a, double s) {
  Tape::Attrs at;
  at.scalar = s;
  return a.tape().push(Op::kAddScalar, {a.id()}, map(a.value(), [s](double v) { return v + s; }), at);
}

Var exp(Var a) { return a.tape().push(Op::kExp, {a.id()}, map(a.value(), [](double v) { return std::exp(v); })); }
Var log(Var a) { return a.tape().push(Op::kLog, {a.id()}, map(a.value(), [](double v) { return std::log(v); })); }
Var tanh(Var a) { return a.tape().push(Op::kTanh, {a.id()}, map(a.value(), [](double v) { return std::tanh(v); })); }
Var relu(Var a) { return a.tape().push(Op::kRelu, {a.id()}, map(a.value(), [](double v) { return v > 0 ? v : 0.0; })); }
Var sigmoid(Var a) { return a.tape().push(Op::kSigmoid, {a.id()}, map(a.value(), sigmoid_scalar)); }
Var softplus(Var a) { return a.tape().push(Op::kSoftplus, {a.id()}, map(a.value(), softplus_scalar)); }
Var square(Var a) { return a.tape().push(Op::kSquare, {a.id()}, map(a.value(), [](double v) { return v * v; })); }

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.push(Op::kMatMul, {a.id(), b.id()}, stn::matmul(a.value(), b.value()));
}

Var transpose(Var a) { return a.tape().push(Op::kTranspose, {a.id()}, stn::transpose(a.value())); }

Var sum(Var a) { return a.tape().push(Op::kSum, {a.id()}, Tensor::scalar(stn::sum(a.value()))); }

Var sum(Var a, std::size_t axis) {
  Tape::Attrs at;
  at.axis = axis;
  return a.tape().push(Op::kSumAxis, {a.id()}, stn::sum_axis(a.value(), axis), at);
}

Var row_scale(Var v, Var m) {
  Tape& t = same_tape(v, m);
  return t.push(Op::kRowScale, {v.id(), m.id()}, stn::row_scale(v.value(), m.value()));
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "concat of zero variables");
  std::vector<Tensor> values;
  std::vector<int> ids;
  for (const auto& p : parts) {
    same_tape(parts.front(), p);
    values.push_back(p.value());
    ids.push_back(p.id());
  }
  Tape::Attrs at;
  at.axis = axis;
  return parts.front().tape().push(Op::kConcat, std::move(ids), stn::concat(values, axis), at);
}

Var slice(Var a, std::size_t axis, std::size_t start, std::size_t len) {
  Tape::Attrs at;
  at.axis = axis;
  at.start = start;
  at.len = len;
  return a.tape().push(Op::kSlice, {a.id()}, stn::slice(a.value(), axis, start, len), at);
}

Var reshape(Var a, Shape shape) {
  Tape::Attrs at;
  at.shape = shape;
  return a.tape().push(Op::kReshape, {a.id()}, a.value().reshaped(std::move(shape)), at);
}

Var conv2d(Var input, Var kernels, Var bias) {
  Tape& t = same_tape(input, kernels);
  std::vector<int> ids{input.id(), kernels.id()};
  const Tensor* b = nullptr;
  if (bias.valid()) {
    same_tape(input, bias);
    ids.push_back(bias.id());
    b = &bias.value();
  }
  return t.push(Op::kConv2d, std::move(ids), stn::conv2d(input.value(), kernels.value(), b));
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

Var mean(Var a, std::size_t axis) {
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.value().dim(axis)));
}

Var matvec(Var m, Var v) {
  const std::size_t n = v.value().numel();
  return reshape(matmul(m, reshape(v, {n, 1})), {m.value().rows()});
}

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var sum_squares(Var a) { return sum(square(a)); }

Recording record(const Computation& fn, const std::vector<Tensor>& inputs, bool requires_grad) {
  Recording rec;
  rec.tape = std::make_unique<Tape>();
  for (const auto& t : inputs) rec.inputs.push_back(rec.tape->leaf(t, requires_grad));
  rec.output = fn(*rec.tape, rec.inputs);
  return rec;
}

std::vector<Tensor> gradient(const Computation& fn, const std::vector<Tensor>& inputs) {
  auto rec = record(fn, inputs, true);
  auto grads = rec.tape->backward(rec.output);
  std::vector<Tensor> out;
  for (const auto& v : rec.inputs) out.push_back(grads.of(v));
  return out;
}

DualTensor jvp(const Computation& fn, const std::vector<Tensor>& primals, const std::vector<Tensor>& tangents) {
  require(primals.size() == tangents.size(), ErrorCode::kShapeMismatch, "jvp needs one tangent per primal input");
  auto rec = record(fn, primals, false);
  std::vector<std::pair<Var, Var>> seeds;
  for (std::size_t i = 0; i < primals.size(); ++i) {
    require(primals[i].shape() == tangents[i].shape(), ErrorCode::kShapeMismatch,
            "tangent " + std::to_string(i) + " has shape " + shape_str(tangents[i].shape()) + ", primal has " +
                shape_str(primals[i].shape()));
    seeds.emplace_back(rec.inputs[i], rec.tape->constant(tangents[i]));
  }
  Var t = rec.tape->jvp(rec.output, seeds);
  return DualTensor{rec.output.value(), t.value()};
}

}  // namespace stn::ad
