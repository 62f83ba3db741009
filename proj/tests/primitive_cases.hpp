// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "support.hpp"

namespace stn::testing {

using ad::Var;

struct PrimitiveCase {
  std::string name;
  ad::Computation fn;  // scalar output
  std::vector<Tensor> inputs;
};

// One scalar-valued probe per primitive. Non-scalar primitives are reduced
// with a random weighting so every output entry contributes distinctly.
inline std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed = 7) {
  RngStream rng(seed, "primitive-cases");
  auto weigh = [](Var y, const Tensor& r) { return ad::sum(ad::mul(y, y.tape().constant(r))); };
  using ad::Tape;
  using V = std::span<const Var>;
  std::vector<PrimitiveCase> cases;
  auto unary = [&](std::string name, Var (*op)(Var), double lo, double hi, Shape in_shape = {3, 4}) {
    Tensor r = random_tensor(rng, {3, 4});
    cases.push_back({name, [=](Tape&, V in) { return weigh(op(in[0]), r); }, {random_tensor(rng, in_shape, lo, hi)}});
  };
  auto binary = [&](std::string name, Var (*op)(Var, Var), Shape sa, Shape sb, double lo, double hi) {
    Shape out = broadcast_shape(sa, sb);
    Tensor r = random_tensor(rng, out);
    cases.push_back({name, [=](Tape&, V in) { return weigh(op(in[0], in[1]), r); },
                     {random_tensor(rng, sa), random_tensor(rng, sb, lo, hi)}});
  };
  binary("add", ad::add, {3, 4}, {3, 4}, -1, 1);
  binary("add_row_broadcast", ad::add, {3, 4}, {1, 4}, -1, 1);
  binary("add_col_broadcast", ad::add, {3, 4}, {3, 1}, -1, 1);
  binary("add_scalar_broadcast", ad::add, {3, 4}, {1}, -1, 1);
  binary("sub", ad::sub, {3, 4}, {3, 4}, -1, 1);
  binary("sub_row_broadcast", ad::sub, {3, 4}, {4}, -1, 1);
  binary("mul", ad::mul, {3, 4}, {3, 4}, -1, 1);
  binary("mul_col_broadcast", ad::mul, {3, 4}, {3, 1}, -1, 1);
  binary("div", ad::div, {3, 4}, {3, 4}, 0.5, 2.0);
  binary("div_row_broadcast", ad::div, {3, 4}, {1, 4}, 0.5, 2.0);
  unary("neg", ad::neg, -1, 1);
  unary("exp", ad::exp, -1, 1);
  unary("log", ad::log, 0.5, 2.0);
  unary("tanh", ad::tanh, -2, 2);
  unary("relu", ad::relu, -1, 1);
  unary("sigmoid", ad::sigmoid, -3, 3);
  unary("softplus", ad::softplus, -3, 3);
  unary("square", ad::square, -1, 1);
  unary("transpose", ad::transpose, -1, 1, {4, 3});
  {
    Tensor r = random_tensor(rng, {3, 4});
    cases.push_back({"scale", [=](Tape&, V in) { return weigh(ad::scale(in[0], -1.7), r); },
                     {random_tensor(rng, {3, 4})}});
    cases.push_back({"add_scalar", [=](Tape&, V in) { return weigh(ad::add_scalar(in[0], 0.3), r); },
                     {random_tensor(rng, {3, 4})}});
  }
  {
    Tensor r = random_tensor(rng, {3, 5});
    cases.push_back({"matmul", [=](Tape&, V in) { return weigh(ad::matmul(in[0], in[1]), r); },
                     {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 5})}});
  }
  cases.push_back({"sum", [](Tape&, V in) { return ad::sum(ad::square(in[0])); }, {random_tensor(rng, {3, 4})}});
  for (std::size_t axis : {0, 1}) {
    Tensor r = random_tensor(rng, axis == 0 ? Shape{1, 4} : Shape{3, 1});
    cases.push_back({"sum_axis" + std::to_string(axis), [=](Tape&, V in) { return weigh(ad::sum(in[0], axis), r); },
                     {random_tensor(rng, {3, 4})}});
    cases.push_back({"mean_axis" + std::to_string(axis),
                     [=](Tape&, V in) { return weigh(ad::mean(in[0], axis), r); },
                     {random_tensor(rng, {3, 4})}});
  }
  {
    Tensor r = random_tensor(rng, {3, 4});
    cases.push_back({"row_scale", [=](Tape&, V in) { return weigh(ad::row_scale(in[0], in[1]), r); },
                     {random_tensor(rng, {3}), random_tensor(rng, {3, 4})}});
  }
  for (std::size_t axis : {0, 1}) {
    Tensor r = random_tensor(rng, axis == 0 ? Shape{5, 4} : Shape{3, 6});
    cases.push_back({"concat_axis" + std::to_string(axis),
                     [=](Tape&, V in) { return weigh(ad::concat({in[0], in[1]}, axis), r); },
                     {random_tensor(rng, {3, 4}), random_tensor(rng, axis == 0 ? Shape{2, 4} : Shape{3, 2})}});
    Tensor rs = random_tensor(rng, axis == 0 ? Shape{2, 4} : Shape{3, 2});
    cases.push_back({"slice_axis" + std::to_string(axis),
                     [=](Tape&, V in) { return weigh(ad::slice(in[0], axis, 1, 2), rs); },
                     {random_tensor(rng, {3, 4})}});
  }
  {
    Tensor r = random_tensor(rng, {4, 3});
    cases.push_back({"reshape", [=](Tape&, V in) { return weigh(ad::reshape(in[0], {4, 3}), r); },
                     {random_tensor(rng, {3, 4})}});
  }
  {
    Tensor r = random_tensor(rng, {2, 3, 3, 2});
    cases.push_back({"conv2d", [=](Tape&, V in) { return weigh(ad::conv2d(in[0], in[1], in[2]), r); },
                     {random_tensor(rng, {2, 2, 4, 3}), random_tensor(rng, {3, 2, 2, 2}), random_tensor(rng, {3})}});
  }
  return cases;
}

}  // namespace stn::testing
