// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stn/autodiff.hpp"
#include "stn/models.hpp"
#include "stn/rng.hpp"
#include "stn/tensor.hpp"

namespace stn::hyper {

using ad::Tape;
using ad::Var;
using models::Model;

enum class TransformKind { kExp, kSigmoidRange, kSoftplus, kIdentity };

/// Fixed map from the unconstrained optimization variable to the
/// hyperparameter's domain.
struct TransformSpec {
  TransformKind kind = TransformKind::kExp;
  double lo = 0.0;  // sigmoid_range only
  double hi = 1.0;
  std::optional<std::pair<double, double>> clamp;  // applied after the map

  static TransformSpec exp() { return {TransformKind::kExp, 0.0, 1.0, std::nullopt}; }
  static TransformSpec identity() { return {TransformKind::kIdentity, 0.0, 1.0, std::nullopt}; }
  static TransformSpec softplus() { return {TransformKind::kSoftplus, 0.0, 1.0, std::nullopt}; }
  static TransformSpec sigmoid_range(double lo, double hi);

  /// Closed hull of the image, as (lo, hi); infinite ends for unbounded maps.
  std::pair<double, double> image() const;
  std::string describe() const;
  friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

inline constexpr double kGuardBand = 1e-6;

double transform(const TransformSpec& spec, double raw);
/// d transform / d raw (zero where the clamp is active).
double transform_derivative(const TransformSpec& spec, double raw);
/// Raw value mapping to `domain`. Values outside the closed image throw;
/// sigmoid_range inputs are clamped into [lo + 1e-6, hi - 1e-6] first.
double inverse_transform(const TransformSpec& spec, double domain);

Tensor transform_all(const std::vector<TransformSpec>& specs, const Tensor& raw);
Var transform_all(const std::vector<TransformSpec>& specs, Var raw);

struct HyperparamState {
  std::vector<std::string> names;
  Tensor lambda;     // (h) raw
  Tensor lambda0;    // (h) center
  Tensor log_sigma;  // (h)
  std::vector<TransformSpec> transforms;

  /// Builds the state from DOMAIN-unit initial values.
  static HyperparamState from_domain(std::vector<std::string> names, std::vector<TransformSpec> transforms,
                                     const std::vector<double>& init_domain, double sigma);

  std::size_t size() const { return lambda.numel(); }
  Tensor sigma() const;
  Tensor transformed() const { return transform_all(transforms, lambda); }
  void validate() const;
};

enum class HypernetKind { kUncentered, kCentered, kStructured };

const char* to_string(HypernetKind kind);
HypernetKind hypernet_kind_from_string(const std::string& s);

/// Base parameters produce the weights at the center; response parameters
/// carry the dependence on the hyperparameters.
enum class ParamRole { kBase, kResponse };

struct HyperParam {
  std::string name;
  Tensor value;
  ParamRole role = ParamRole::kBase;
};

/// Linear best-response hypernetwork over the flat weight vector of `model`.
///  uncentered:  w = Phi lambda + phi0
///  centered:    w = Theta (lambda - lambda0) + w0
///  structured:  per layer, W = W_general + (U delta) (.)row W_response and
///               b = b_general + (V delta) (.) b_response, scaled per output
///               unit (dense) or per output channel (conv).
class Hypernet {
 public:
  static Hypernet uncentered(const Model& model, std::size_t h, RngStream& init);
  static Hypernet centered(const Model& model, std::size_t h, RngStream& init);
  static Hypernet structured(const Model& model, std::size_t h, RngStream& init);
  static Hypernet create(HypernetKind kind, const Model& model, std::size_t h, RngStream& init);

  HypernetKind kind() const { return kind_; }
  const Model& model() const { return model_; }
  std::size_t num_hyper() const { return h_; }
  std::size_t num_weights() const { return model_.num_weights(); }
  std::size_t num_params() const;

  std::vector<HyperParam>& params() { return params_; }
  const std::vector<HyperParam>& params() const { return params_; }
  std::vector<Tensor> values() const;
  void set_values(const std::vector<Tensor>& values);
  /// Tape leaves for every parameter, in params() order.
  std::vector<Var> leaves(Tape& tape, bool requires_grad = true) const;

  Var respond(std::span<const Var> p, Var lambda, Var lambda0) const;
  /// Weights at lambda == lambda0 (for uncentered: Phi lambda0 + phi0).
  Var base(std::span<const Var> p, Var lambda0) const;
  /// Hyperparameter-dependent part: respond(lambda0 + delta) - base(lambda0).
  Var response(std::span<const Var> p, Var delta) const;

  Tensor respond(const Tensor& lambda, const Tensor& lambda0) const;
  Tensor base(const Tensor& lambda0) const;
  Tensor response(const Tensor& delta) const;
  /// dw/dlambda as an (m x h) matrix; exact because every form is affine.
  Tensor jacobian() const;

  /// Zeroes Phi / Theta / U and V.
  void zero_response();

 private:
  Hypernet(HypernetKind kind, const Model& model, std::size_t h) : kind_(kind), model_(model), h_(h) {}
  Var structured_weights(std::span<const Var> p, Var delta, bool include_base, bool include_response) const;

  HypernetKind kind_;
  Model model_;
  std::size_t h_;
  std::vector<HyperParam> params_;
};

/// Parameter count added by the structured form for one dense layer with
/// bias: m_out (2 m_in + h) + m_out (2 + h).
std::size_t structured_dense_param_count(std::size_t m_in, std::size_t m_out, std::size_t h);

// Plain-tensor forms.
Tensor respond_uncentered(const Tensor& Phi, const Tensor& phi0, const Tensor& lambda);
Tensor respond_centered(const Tensor& Theta, const Tensor& w0, const Tensor& lambda, const Tensor& lambda0);

/// y' = f(x, w0, plan) + J_w f(x, w0, plan) dw, with the tangent recorded on
/// the tape so it stays differentiable in dw.
Var linearized_forward(Tape& tape, const Model& model, Var w0, Var dw, Var x, const models::DropoutPlan& plan);

/// Linearized prediction around the base weights for perturbation eps:
/// f(x, w0, masks) + J (response(eps)). `masks` should be drawn at the
/// perturbed hyperparameters.
Tensor predict_linearized(const Hypernet& net, const Tensor& x, const Tensor& lambda0, const Tensor& eps,
                          const models::DropoutMasks& masks = {});

}  // namespace stn::hyper
