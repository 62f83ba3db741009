// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "stn/autodiff.hpp"
#include "stn/rng.hpp"
#include "stn/tensor.hpp"

namespace stn::models {

using ad::Tape;
using ad::Var;

enum class Activation { kIdentity, kRelu, kTanh };

/// y = act(x W + b) with W stored (in x out), row-major.
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::kIdentity;
  bool bias = true;
};

/// Valid cross-correlation over (channels, height, width) images that are
/// stored flattened in each row of the batch.
struct ConvLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t in_height = 0;
  std::size_t in_width = 0;
  Activation activation = Activation::kIdentity;

  std::size_t out_height() const { return in_height - kernel + 1; }
  std::size_t out_width() const { return in_width - kernel + 1; }
};

using Layer = std::variant<DenseLayer, ConvLayer>;

/// Location of one weight tensor inside the flat weight vector.
struct ParamBlock {
  std::size_t layer = 0;
  bool is_bias = false;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size() const { return shape_numel(shape); }
};

/// Per-site action for dropout. Site 0 is the input; site k >= 1 is the
/// output of layer k-1 (hidden layers only).
struct DropoutSite {
  std::optional<Tensor> mask;  // training: Bernoulli keep mask
  Var keep;                    // evaluation: multiply by (1 - rate)
};

struct DropoutPlan {
  std::vector<DropoutSite> sites;
};

struct DropoutMasks {
  std::vector<std::optional<Tensor>> masks;  // indexed by site
};

class Model {
 public:
  explicit Model(std::vector<Layer> layers);

  static Model linear(std::size_t in, bool bias = false);
  static Model mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Activation act);
  /// `depth` square (dim x dim) identity-activation layers followed by a
  /// dim -> out projection, no biases.
  static Model linear_network(std::size_t dim, std::size_t depth, std::size_t out);

  const std::vector<Layer>& layers() const { return layers_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t num_weights() const { return num_weights_; }
  std::size_t num_sites() const { return layers_.size(); }
  std::size_t site_width(std::size_t site) const;
  bool is_linear_network() const;

  /// Fan-in scaled uniform weights, zero biases.
  Tensor init_weights(RngStream& rng) const;

  Var forward(Tape& tape, Var weights, Var x, const DropoutPlan& plan = {}) const;
  /// Block `b` of the flat weight vector reshaped to its native shape.
  Var block(Var weights, std::size_t b) const;

 private:
  std::vector<Layer> layers_;
  std::vector<ParamBlock> blocks_;
  std::size_t num_weights_ = 0;
};

enum class LossKind { kMse, kCrossEntropy };
enum class RegKind { kWeightDecay, kInputDropout, kActivationDropout, kJacobianNorm };
enum class PenaltyScaling { kPerN, kUnscaled };

struct Regularizer {
  RegKind kind = RegKind::kWeightDecay;
  std::size_t hyper_index = 0;
  std::size_t site = 0;  // dropout site for kActivationDropout (>= 1)
};

/// Training objective: data fit plus hyperparameter-weighted regularizers.
/// The validation objective always uses the plain data fit.
struct RegularizedObjective {
  LossKind loss = LossKind::kMse;
  std::vector<Regularizer> regularizers;
  PenaltyScaling scaling = PenaltyScaling::kPerN;
  std::size_t n_train = 1;

  void validate(const Model& model, std::size_t num_hyper) const;
  /// Dropout rate per site for the transformed hyperparameters; nullopt
  /// for sites without dropout.
  std::vector<std::optional<double>> dropout_rates(const Model& model, const Tensor& lambda_t) const;
};

struct Batch {
  Tensor x;  // (N, input_dim)
  Tensor t;  // (N) regression targets or class ids
  std::size_t size() const { return x.rows(); }
};

Var data_loss(Tape& tape, LossKind loss, Var predictions, const Tensor& targets);
Var penalty(Tape& tape, const Model& model, const RegularizedObjective& obj, Var lambda_t, Var weights);
Var jacobian_norm_penalty(const Model& model, Var weights, Var strength, double n);

DropoutPlan training_plan(const DropoutMasks& masks);
DropoutPlan evaluation_plan(const Model& model, const RegularizedObjective& obj, Var lambda_t);

Var training_loss(Tape& tape, const Model& model, const RegularizedObjective& obj, Var lambda_t, Var weights,
                  const Batch& batch, const DropoutMasks& masks);
Var validation_loss(Tape& tape, const Model& model, const RegularizedObjective& obj, Var lambda_t, Var weights,
                    const Batch& batch);

/// Per-site Bernoulli keep masks (keep probability 1 - rate, no rescaling).
DropoutMasks sample_dropout_masks(const std::vector<std::optional<double>>& rates, const std::vector<Shape>& shapes,
                                  RngStream& rng);
DropoutMasks sample_dropout_masks(const Model& model, const RegularizedObjective& obj, const Tensor& lambda_t,
                                  std::size_t batch_size, RngStream& rng);

// Eager conveniences.
Tensor forward(const Model& model, const Tensor& x, const Tensor& weights, const DropoutMasks& masks = {});
double training_loss(const Model& model, const RegularizedObjective& obj, const Tensor& lambda_t, const Tensor& weights,
                     const Batch& batch, const DropoutMasks& masks = {});
double validation_loss(const Model& model, const RegularizedObjective& obj, const Tensor& lambda_t,
                       const Tensor& weights, const Batch& batch);
double jacobian_norm_penalty(const Model& model, const Tensor& weights, double strength, double n);
/// Gradient of the training loss with respect to the flat weights.
Tensor training_gradient(const Model& model, const RegularizedObjective& obj, const Tensor& lambda_t,
                         const Tensor& weights, const Batch& batch, const DropoutMasks& masks = {});
Tensor validation_gradient(const Model& model, const RegularizedObjective& obj, const Tensor& lambda_t,
                           const Tensor& weights, const Batch& batch);

}  // namespace stn::models
