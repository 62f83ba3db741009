// SPDX-License-Identifier: Apache-2.0
#include "stn/optim.hpp"

#include <cmath>

#include "stn/error.hpp"

namespace stn::optim {

const char* to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kMomentum: return "sgd_momentum";
    case OptimizerKind::kRmsprop: return "rmsprop";
    case OptimizerKind::kAdam: return "adam";
  }
  return "?";
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "sgd_momentum" || s == "momentum") return OptimizerKind::kMomentum;
  if (s == "rmsprop") return OptimizerKind::kRmsprop;
  if (s == "adam") return OptimizerKind::kAdam;
  fail(ErrorCode::kConfig, "unknown optimizer '" + s + "' (expected sgd, sgd_momentum, rmsprop or adam)");
}

void OptimizerSpec::validate(const std::string& what) const {
  require(lr > 0 && std::isfinite(lr), ErrorCode::kConfig, what + ": learning rate must be positive");
  require(momentum >= 0 && momentum < 1, ErrorCode::kConfig, what + ": momentum must be in [0,1)");
  require(rho > 0 && rho < 1, ErrorCode::kConfig, what + ": rho must be in (0,1)");
  require(beta1 >= 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, ErrorCode::kConfig, what + ": betas must be in [0,1)");
  require(eps > 0, ErrorCode::kConfig, what + ": eps must be positive");
}

void Optimizer::step(std::size_t slot, Tensor& param, const Tensor& grad) {
  require(param.same_shape(grad), ErrorCode::kShapeMismatch,
          "gradient " + shape_str(grad.shape()) + " does not match parameter " + shape_str(param.shape()));
  if (slots_.size() <= slot) slots_.resize(slot + 1);
  Slot& s = slots_[slot];
  if (!s.initialized) {
    s.m = Tensor::zeros(param.shape());
    s.v = Tensor::zeros(param.shape());
    s.initialized = true;
  }
  s.t += 1;
  const double lr = spec_.lr;
  auto p = param.data();
  auto g = grad.data();
  auto m = s.m.data();
  auto v = s.v.data();
  switch (spec_.kind) {
    case OptimizerKind::kSgd:
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
      break;
    case OptimizerKind::kMomentum:
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = spec_.momentum * m[i] + g[i];
        p[i] -= lr * m[i];
      }
      break;
    case OptimizerKind::kRmsprop:
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = spec_.rho * v[i] + (1 - spec_.rho) * g[i] * g[i];
        p[i] -= lr * g[i] / (std::sqrt(v[i]) + spec_.eps);
      }
      break;
    case OptimizerKind::kAdam: {
      const double c1 = 1 - std::pow(spec_.beta1, static_cast<double>(s.t));
      const double c2 = 1 - std::pow(spec_.beta2, static_cast<double>(s.t));
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = spec_.beta1 * m[i] + (1 - spec_.beta1) * g[i];
        v[i] = spec_.beta2 * v[i] + (1 - spec_.beta2) * g[i] * g[i];
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + spec_.eps);
      }
      break;
    }
  }
}

}  // namespace stn::optim
