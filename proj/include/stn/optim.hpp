// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "stn/tensor.hpp"

namespace stn::optim {

enum class OptimizerKind { kSgd, kMomentum, kRmsprop, kAdam };

const char* to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 0.01;
  double momentum = 0.9;  // sgd_momentum
  double rho = 0.9;       // rmsprop
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate(const std::string& what) const;
  friend bool operator==(const OptimizerSpec&, const OptimizerSpec&) = default;
};

/// Per-slot first-order optimizer. Each slot (one parameter tensor) keeps
/// its own moments and step count, so disjoint parameter groups can be
/// stepped at different times.
class Optimizer {
 public:
  struct Slot {
    Tensor m;
    Tensor v;
    std::size_t t = 0;
    bool initialized = false;
  };

  Optimizer() = default;
  explicit Optimizer(OptimizerSpec spec) : spec_(spec) { spec_.validate("optimizer"); }

  const OptimizerSpec& spec() const { return spec_; }
  void step(std::size_t slot, Tensor& param, const Tensor& grad);

  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  OptimizerSpec spec_;
  std::vector<Slot> slots_;
};

}  // namespace stn::optim
