// SPDX-License-Identifier: Apache-2.0
#include "stn/models.hpp"

#include <algorithm>
#include <cmath>

#include "stn/error.hpp"

namespace stn::models {

namespace {

Var activate(Var h, Activation act) {
  switch (act) {
    case Activation::kRelu: return ad::relu(h);
    case Activation::kTanh: return ad::tanh(h);
    case Activation::kIdentity: break;
  }
  return h;
}

std::size_t layer_in(const Layer& l) {
  if (auto* d = std::get_if<DenseLayer>(&l)) return d->in;
  const auto& c = std::get<ConvLayer>(l);
  return c.in_channels * c.in_height * c.in_width;
}

std::size_t layer_out(const Layer& l) {
  if (auto* d = std::get_if<DenseLayer>(&l)) return d->out;
  const auto& c = std::get<ConvLayer>(l);
  return c.out_channels * c.out_height() * c.out_width();
}

Activation layer_activation(const Layer& l) {
  if (auto* d = std::get_if<DenseLayer>(&l)) return d->activation;
  return std::get<ConvLayer>(l).activation;
}

Var hyper_entry(Var lambda_t, std::size_t k) { return ad::slice(lambda_t, 0, k, 1); }

double penalty_denominator(const RegularizedObjective& obj) {
  return obj.scaling == PenaltyScaling::kPerN ? static_cast<double>(obj.n_train) : 1.0;
}

void check_finite(Var term, const char* name) {
  if (!term.value().all_finite())
    fail(ErrorCode::kNonFinite, std::string("non-finite value in loss term '") + name + "'");
}

}  // namespace

Model::Model(std::vector<Layer> layers) : layers_(std::move(layers)) {
  require(!layers_.empty(), ErrorCode::kInvalidArgument, "model needs at least one layer");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (auto* c = std::get_if<ConvLayer>(&l)) {
      require(c->kernel >= 1 && c->kernel <= c->in_height && c->kernel <= c->in_width && c->in_channels > 0 &&
                  c->out_channels > 0,
              ErrorCode::kInvalidArgument, "invalid convolution layer " + std::to_string(i));
    } else {
      const auto& d = std::get<DenseLayer>(l);
      require(d.in > 0 && d.out > 0, ErrorCode::kInvalidArgument, "dense layer " + std::to_string(i) + " has a zero extent");
    }
    if (i > 0)
      require(layer_out(layers_[i - 1]) == layer_in(l), ErrorCode::kShapeMismatch,
              "layer " + std::to_string(i) + " input width " + std::to_string(layer_in(l)) +
                  " does not match previous output " + std::to_string(layer_out(layers_[i - 1])));
    if (auto* c = std::get_if<ConvLayer>(&l)) {
      blocks_.push_back(ParamBlock{i, false, {c->out_channels, c->in_channels, c->kernel, c->kernel}, num_weights_});
      num_weights_ += blocks_.back().size();
      blocks_.push_back(ParamBlock{i, true, {c->out_channels}, num_weights_});
      num_weights_ += blocks_.back().size();
    } else {
      const auto& d = std::get<DenseLayer>(l);
      blocks_.push_back(ParamBlock{i, false, {d.in, d.out}, num_weights_});
      num_weights_ += blocks_.back().size();
      if (d.bias) {
        blocks_.push_back(ParamBlock{i, true, {d.out}, num_weights_});
        num_weights_ += blocks_.back().size();
      }
    }
  }
}

Model Model::linear(std::size_t in, bool bias) { return Model({DenseLayer{in, 1, Activation::kIdentity, bias}}); }

Model Model::mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Activation act) {
  std::vector<Layer> layers;
  std::size_t prev = in;
  for (auto h : hidden) {
    layers.push_back(DenseLayer{prev, h, act, true});
    prev = h;
  }
  layers.push_back(DenseLayer{prev, out, Activation::kIdentity, true});
  return Model(std::move(layers));
}

Model Model::linear_network(std::size_t dim, std::size_t depth, std::size_t out) {
  std::vector<Layer> layers;
  for (std::size_t i = 0; i < depth; ++i) layers.push_back(DenseLayer{dim, dim, Activation::kIdentity, false});
  layers.push_back(DenseLayer{dim, out, Activation::kIdentity, false});
  return Model(std::move(layers));
}

std::size_t Model::input_dim() const { return layer_in(layers_.front()); }
std::size_t Model::output_dim() const { return layer_out(layers_.back()); }

std::size_t Model::site_width(std::size_t site) const {
  require(site < num_sites(), ErrorCode::kInvalidArgument, "dropout site " + std::to_string(site) + " out of range");
  return site == 0 ? input_dim() : layer_out(layers_[site - 1]);
}

bool Model::is_linear_network() const {
  return std::all_of(layers_.begin(), layers_.end(), [](const Layer& l) {
    auto* d = std::get_if<DenseLayer>(&l);
    return d && d->activation == Activation::kIdentity;
  });
}

Tensor Model::init_weights(RngStream& rng) const {
  Tensor w(Shape{num_weights_});
  for (const auto& b : blocks_) {
    if (b.is_bias) continue;
    std::size_t fan_in = b.shape.size() == 4 ? b.shape[1] * b.shape[2] * b.shape[3] : b.shape[0];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t k = 0; k < b.size(); ++k) w[b.offset + k] = rng.uniform(-bound, bound);
  }
  return w;
}

Var Model::block(Var weights, std::size_t b) const {
  const auto& blk = blocks_.at(b);
  return ad::reshape(ad::slice(weights, 0, blk.offset, blk.size()), blk.shape);
}

Var Model::forward(Tape& tape, Var weights, Var x, const DropoutPlan& plan) const {
  require(weights.shape() == Shape{num_weights_}, ErrorCode::kShapeMismatch,
          "weights have shape " + shape_str(weights.shape()) + ", model needs (" + std::to_string(num_weights_) + ")");
  require(x.value().rank() == 2 && x.value().cols() == input_dim(), ErrorCode::kShapeMismatch,
          "input batch has shape " + shape_str(x.shape()) + ", model expects (N," + std::to_string(input_dim()) + ")");
  const std::size_t n = x.value().rows();
  auto apply_site = [&](Var h, std::size_t site) {
    if (site >= plan.sites.size()) return h;
    const auto& s = plan.sites[site];
    if (s.mask) {
      require(s.mask->shape() == h.shape(), ErrorCode::kShapeMismatch,
              "dropout mask at site " + std::to_string(site) + " has shape " + shape_str(s.mask->shape()));
      return ad::mul(h, tape.constant(*s.mask));
    }
    if (s.keep.valid()) return ad::mul(h, s.keep);
    return h;
  };

  Var h = apply_site(x, 0);
  std::size_t b = 0;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const auto& l = layers_[li];
    if (auto* c = std::get_if<ConvLayer>(&l)) {
      Var img = ad::reshape(h, {n, c->in_channels, c->in_height, c->in_width});
      Var k = block(weights, b++);
      Var bias = block(weights, b++);
      h = ad::reshape(ad::conv2d(img, k, bias), {n, layer_out(l)});
    } else {
      const auto& d = std::get<DenseLayer>(l);
      h = ad::matmul(h, block(weights, b++));
      if (d.bias) h = ad::add(h, block(weights, b++));
    }
    h = activate(h, layer_activation(l));
    if (li + 1 < layers_.size()) h = apply_site(h, li + 1);
  }
  return h;
}

void RegularizedObjective::validate(const Model& model, std::size_t num_hyper) const {
  std::vector<bool> bound(num_hyper, false);
  std::vector<bool> site_used(model.num_sites(), false);
  for (const auto& r : regularizers) {
    require(r.hyper_index < num_hyper, ErrorCode::kConfig,
            "regularizer bound to hyperparameter " + std::to_string(r.hyper_index) + " but only " +
                std::to_string(num_hyper) + " are declared");
    require(!bound[r.hyper_index], ErrorCode::kConfig,
            "hyperparameter " + std::to_string(r.hyper_index) + " is bound to more than one regularizer");
    bound[r.hyper_index] = true;
    if (r.kind == RegKind::kInputDropout || r.kind == RegKind::kActivationDropout) {
      const std::size_t site = r.kind == RegKind::kInputDropout ? 0 : r.site;
      require(site < model.num_sites() && (r.kind == RegKind::kInputDropout || site >= 1), ErrorCode::kConfig,
              "activation dropout site " + std::to_string(site) + " does not exist");
      require(!site_used[site], ErrorCode::kConfig, "dropout site " + std::to_string(site) + " bound twice");
      site_used[site] = true;
    }
    if (r.kind == RegKind::kJacobianNorm)
      require(model.is_linear_network(), ErrorCode::kConfig,
              "jacobian-norm penalty is only defined for linear networks");
  }
  require(n_train >= 1, ErrorCode::kConfig, "n_train must be positive");
}

std::vector<std::optional<double>> RegularizedObjective::dropout_rates(const Model& model,
                                                                       const Tensor& lambda_t) const {
  std::vector<std::optional<double>> rates(model.num_sites());
  for (const auto& r : regularizers) {
    if (r.kind == RegKind::kInputDropout) rates[0] = lambda_t[r.hyper_index];
    if (r.kind == RegKind::kActivationDropout) rates.at(r.site) = lambda_t[r.hyper_index];
  }
  return rates;
}

Var data_loss(Tape& tape, LossKind loss, Var predictions, const Tensor& targets) {
  const Tensor& y = predictions.value();
  const std::size_t n = y.rows();
  require(targets.numel() == (loss == LossKind::kMse ? y.numel() : n), ErrorCode::kShapeMismatch,
          "targets " + shape_str(targets.shape()) + " do not match predictions " + shape_str(y.shape()));
  if (loss == LossKind::kMse) {
    Var t = tape.constant(targets.reshaped(y.shape()));
    return ad::scale(ad::sum_squares(ad::sub(predictions, t)), 0.5 / static_cast<double>(n));
  }
  // Cross-entropy from logits with a constant per-row shift.
  const std::size_t classes = y.cols();
  Tensor shift(Shape{n, 1});
  Tensor onehot(Shape{n, classes});
  for (std::size_t i = 0; i < n; ++i) {
    double m = y.at(i, 0);
    for (std::size_t j = 1; j < classes; ++j) m = std::max(m, y.at(i, j));
    shift[i] = m;
    const double cls = targets[i];
    require(cls >= 0 && cls < static_cast<double>(classes) && cls == std::floor(cls), ErrorCode::kInvalidArgument,
            "class id " + std::to_string(cls) + " out of range at row " + std::to_string(i));
    onehot.at(i, static_cast<std::size_t>(cls)) = 1.0;
  }
  Var z = ad::sub(predictions, tape.constant(shift));
  Var lse = ad::log(ad::sum(ad::exp(z), 1));
  Var logp = ad::sub(z, lse);
  return ad::scale(ad::sum(ad::mul(logp, tape.constant(onehot))), -1.0 / static_cast<double>(n));
}

Var jacobian_norm_penalty(const Model& model, Var weights, Var strength, double n) {
  require(model.is_linear_network(), ErrorCode::kInvalidArgument,
          "jacobian-norm penalty needs a linear network (identity activations, dense layers)");
  Var product;
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    if (model.blocks()[b].is_bias) continue;
    Var w = model.block(weights, b);
    product = product.valid() ? ad::matmul(product, w) : w;
  }
  return ad::scale(ad::mul(strength, ad::sum_squares(product)), 0.5 / n);
}

Var penalty(Tape& tape, const Model& model, const RegularizedObjective& obj, Var lambda_t, Var weights) {
  Var total = tape.constant(Tensor::scalar(0.0));
  const double n = penalty_denominator(obj);
  for (const auto& r : obj.regularizers) {
    if (r.kind == RegKind::kWeightDecay) {
      Var term = ad::scale(ad::mul(hyper_entry(lambda_t, r.hyper_index), ad::sum_squares(weights)), 0.5 / n);
      total = ad::add(total, ad::reshape(term, {}));
    } else if (r.kind == RegKind::kJacobianNorm) {
      total = ad::add(total, ad::reshape(jacobian_norm_penalty(model, weights, hyper_entry(lambda_t, r.hyper_index), n), {}));
    }
  }
  return total;
}

DropoutPlan training_plan(const DropoutMasks& masks) {
  DropoutPlan plan;
  for (const auto& m : masks.masks) plan.sites.push_back(DropoutSite{m, {}});
  return plan;
}

DropoutPlan evaluation_plan(const Model& model, const RegularizedObjective& obj, Var lambda_t) {
  DropoutPlan plan;
  plan.sites.resize(model.num_sites());
  for (const auto& r : obj.regularizers) {
    if (r.kind != RegKind::kInputDropout && r.kind != RegKind::kActivationDropout) continue;
    const std::size_t site = r.kind == RegKind::kInputDropout ? 0 : r.site;
    plan.sites.at(site).keep = ad::add_scalar(ad::neg(hyper_entry(lambda_t, r.hyper_index)), 1.0);
  }
  return plan;
}

Var training_loss(Tape& tape, const Model& model, const RegularizedObjective& obj, Var lambda_t, Var weights,
                  const Batch& batch, const DropoutMasks& masks) {
  Var y = model.forward(tape, weights, tape.constant(batch.x), training_plan(masks));
  Var fit = data_loss(tape, obj.loss, y, batch.t);
  check_finite(fit, "data");
  Var reg = penalty(tape, model, obj, lambda_t, weights);
  check_finite(reg, "penalty");
  return ad::add(fit, reg);
}

Var validation_loss(Tape& tape, const Model& model, const RegularizedObjective& obj, Var lambda_t, Var weights,
                    const Batch& batch) {
  Var y = model.forward(tape, weights, tape.constant(batch.x), evaluation_plan(model, obj, lambda_t));
  Var fit = data_loss(tape, obj.loss, y, batch.t);
  check_finite(fit, "validation");
  return fit;
}

DropoutMasks sample_dropout_masks(const std::vector<std::optional<double>>& rates, const std::vector<Shape>& shapes,
                                  RngStream& rng) {
  require(rates.size() == shapes.size(), ErrorCode::kShapeMismatch, "one mask shape per dropout site required");
  DropoutMasks out;
  for (std::size_t s = 0; s < rates.size(); ++s) {
    if (!rates[s]) {
      out.masks.emplace_back();
      continue;
    }
    const double rate = *rates[s];
    require(rate >= 0.0 && rate < 1.0, ErrorCode::kInvalidArgument,
            "dropout rate " + std::to_string(rate) + " at site " + std::to_string(s) + " is outside [0,1)");
    Tensor mask(shapes[s]);
    for (auto& v : mask.data()) v = rng.bernoulli(1.0 - rate) ? 1.0 : 0.0;
    out.masks.emplace_back(std::move(mask));
  }
  return out;
}

DropoutMasks sample_dropout_masks(const Model& model, const RegularizedObjective& obj, const Tensor& lambda_t,
                                  std::size_t batch_size, RngStream& rng) {
  auto rates = obj.dropout_rates(model, lambda_t);
  std::vector<Shape> shapes;
  for (std::size_t s = 0; s < model.num_sites(); ++s) shapes.push_back({batch_size, model.site_width(s)});
  return sample_dropout_masks(rates, shapes, rng);
}

Tensor forward(const Model& model, const Tensor& x, const Tensor& weights, const DropoutMasks& masks) {
  Tape tape;
  return model.forward(tape, tape.constant(weights), tape.constant(x), training_plan(masks)).value();
}

double training_loss(const Model& model, const RegularizedObjective& obj, const Tensor& lambda_t, const Tensor& weights,
                     const Batch& batch, const DropoutMasks& masks) {
  Tape tape;
  return training_loss(tape, model, obj, tape.constant(lambda_t), tape.constant(weights), batch, masks).value().item();
}

double validation_loss(const Model& model, const RegularizedObjective& obj, const Tensor& lambda_t,
                       const Tensor& weights, const Batch& batch) {
  Tape tape;
  return validation_loss(tape, model, obj, tape.constant(lambda_t), tape.constant(weights), batch).value().item();
}

double jacobian_norm_penalty(const Model& model, const Tensor& weights, double strength, double n) {
  Tape tape;
  return jacobian_norm_penalty(model, tape.constant(weights), tape.constant(Tensor::vector({strength})), n)
      .value()
      .item();
}

Tensor training_gradient(const Model& model, const RegularizedObjective& obj, const Tensor& lambda_t,
                         const Tensor& weights, const Batch& batch, const DropoutMasks& masks) {
  Tape tape;
  Var w = tape.leaf(weights);
  Var loss = training_loss(tape, model, obj, tape.constant(lambda_t), w, batch, masks);
  return tape.backward(loss).of(w);
}

Tensor validation_gradient(const Model& model, const RegularizedObjective& obj, const Tensor& lambda_t,
                           const Tensor& weights, const Batch& batch) {
  Tape tape;
  Var w = tape.leaf(weights);
  Var loss = validation_loss(tape, model, obj, tape.constant(lambda_t), w, batch);
  return tape.backward(loss).of(w);
}

}  // namespace stn::models
