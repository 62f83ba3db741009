// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "stn/autodiff.hpp"
#include "stn/rng.hpp"
#include "stn/tensor.hpp"

namespace stn::testing {

inline Tensor random_tensor(RngStream& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]) / std::max(1.0, std::max(std::abs(a[i]), std::abs(b[i]))));
  return m;
}

inline double scalar_of(const ad::Computation& fn, const std::vector<Tensor>& inputs) {
  auto rec = ad::record(fn, inputs, false);
  return rec.output.value().item();
}

/// Central-difference gradient of a scalar computation for input `which`.
inline Tensor numeric_gradient(const ad::Computation& fn, std::vector<Tensor> inputs, std::size_t which,
                               double step = 1e-5) {
  Tensor g(inputs[which].shape());
  for (std::size_t i = 0; i < g.numel(); ++i) {
    const double orig = inputs[which][i];
    inputs[which][i] = orig + step;
    const double up = scalar_of(fn, inputs);
    inputs[which][i] = orig - step;
    const double down = scalar_of(fn, inputs);
    inputs[which][i] = orig;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

/// Largest relative deviation between reverse-mode and central-difference
/// gradients over all inputs.
inline double gradient_check(const ad::Computation& fn, const std::vector<Tensor>& inputs, double step = 1e-5) {
  auto analytic = ad::gradient(fn, inputs);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    worst = std::max(worst, max_rel_diff(analytic[k], numeric_gradient(fn, inputs, k, step)));
  return worst;
}

/// |<grad, tangent> - jvp tangent| for a scalar computation.
inline double forward_reverse_gap(const ad::Computation& fn, const std::vector<Tensor>& inputs,
                                  const std::vector<Tensor>& tangents) {
  auto grads = ad::gradient(fn, inputs);
  double expected = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) expected += dot(grads[k], tangents[k]);
  auto dual = ad::jvp(fn, inputs, tangents);
  return std::abs(expected - dual.tangent.item()) / std::max(1.0, std::abs(expected));
}

}  // namespace stn::testing
