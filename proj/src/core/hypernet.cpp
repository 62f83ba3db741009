// SPDX-License-Identifier: Apache-2.0
#include "stn/hypernet.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "stn/error.hpp"

namespace stn::hyper {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double raw_map(const TransformSpec& s, double x) {
  switch (s.kind) {
    case TransformKind::kExp: return std::exp(x);
    case TransformKind::kSigmoidRange: {
      const double sg = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      return s.lo + (s.hi - s.lo) * sg;
    }
    case TransformKind::kSoftplus: return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    case TransformKind::kIdentity: return x;
  }
  return x;
}

bool clamped(const TransformSpec& s, double mapped) {
  return s.clamp && (mapped < s.clamp->first || mapped > s.clamp->second);
}

Tensor fan_in_uniform(RngStream& rng, Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor block_of(const Tensor& w, const models::ParamBlock& b) {
  return slice(w, 0, b.offset, b.size()).reshaped(b.shape);
}

}  // namespace

TransformSpec TransformSpec::sigmoid_range(double lo, double hi) {
  require(lo < hi, ErrorCode::kConfig, "sigmoid_range needs lo < hi");
  return {TransformKind::kSigmoidRange, lo, hi, std::nullopt};
}

std::pair<double, double> TransformSpec::image() const {
  std::pair<double, double> r;
  switch (kind) {
    case TransformKind::kExp:
    case TransformKind::kSoftplus: r = {0.0, kInf}; break;
    case TransformKind::kSigmoidRange: r = {lo, hi}; break;
    case TransformKind::kIdentity: r = {-kInf, kInf}; break;
  }
  if (clamp) r = {std::max(r.first, clamp->first), std::min(r.second, clamp->second)};
  return r;
}

std::string TransformSpec::describe() const {
  std::ostringstream os;
  switch (kind) {
    case TransformKind::kExp: os << "exp"; break;
    case TransformKind::kSigmoidRange: os << "sigmoid_range(" << lo << "," << hi << ")"; break;
    case TransformKind::kSoftplus: os << "softplus"; break;
    case TransformKind::kIdentity: os << "identity"; break;
  }
  if (clamp) os << " clamp[" << clamp->first << "," << clamp->second << "]";
  return os.str();
}

double transform(const TransformSpec& spec, double raw) {
  double v = raw_map(spec, raw);
  if (spec.clamp) v = std::min(std::max(v, spec.clamp->first), spec.clamp->second);
  return v;
}

double transform_derivative(const TransformSpec& spec, double raw) {
  const double mapped = raw_map(spec, raw);
  if (clamped(spec, mapped)) return 0.0;
  switch (spec.kind) {
    case TransformKind::kExp: return mapped;
    case TransformKind::kSigmoidRange: {
      const double u = (mapped - spec.lo) / (spec.hi - spec.lo);
      return (spec.hi - spec.lo) * u * (1 - u);
    }
    case TransformKind::kSoftplus: return raw >= 0 ? 1.0 / (1.0 + std::exp(-raw)) : std::exp(raw) / (1.0 + std::exp(raw));
    case TransformKind::kIdentity: return 1.0;
  }
  return 1.0;
}

double inverse_transform(const TransformSpec& spec, double domain) {
  require(std::isfinite(domain), ErrorCode::kInvalidArgument, "inverse_transform of a non-finite value");
  auto outside = [&]() {
    fail(ErrorCode::kInvalidArgument,
         "value " + std::to_string(domain) + " lies outside the image of transform " + spec.describe());
  };
  if (spec.clamp && (domain < spec.clamp->first || domain > spec.clamp->second)) outside();
  switch (spec.kind) {
    case TransformKind::kExp:
      if (domain <= 0) outside();
      return std::log(domain);
    case TransformKind::kSoftplus:
      if (domain <= 0) outside();
      return domain > 30 ? domain + std::log1p(-std::exp(-domain)) : std::log(std::expm1(domain));
    case TransformKind::kSigmoidRange: {
      if (domain < spec.lo || domain > spec.hi) outside();
      const double band = std::min(kGuardBand, (spec.hi - spec.lo) / 4);
      const double d = std::min(std::max(domain, spec.lo + band), spec.hi - band);
      const double u = (d - spec.lo) / (spec.hi - spec.lo);
      return std::log(u) - std::log1p(-u);
    }
    case TransformKind::kIdentity: return domain;
  }
  return domain;
}

Tensor transform_all(const std::vector<TransformSpec>& specs, const Tensor& raw) {
  require(specs.size() == raw.numel(), ErrorCode::kShapeMismatch,
          "have " + std::to_string(specs.size()) + " transforms for " + std::to_string(raw.numel()) +
              " hyperparameters");
  Tensor out(raw.shape());
  for (std::size_t i = 0; i < raw.numel(); ++i) out[i] = transform(specs[i], raw[i]);
  return out;
}

Var transform_all(const std::vector<TransformSpec>& specs, Var raw) {
  require(specs.size() == raw.value().numel() && raw.value().rank() == 1, ErrorCode::kShapeMismatch,
          "transform_all expects a vector of " + std::to_string(specs.size()) + " raw hyperparameters");
  Tape& tape = raw.tape();
  std::vector<Var> parts;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    Var x = ad::slice(raw, 0, i, 1);
    if (clamped(s, raw_map(s, raw.value()[i]))) {
      parts.push_back(tape.constant(Tensor::vector({transform(s, raw.value()[i])})));
      continue;
    }
    switch (s.kind) {
      case TransformKind::kExp: parts.push_back(ad::exp(x)); break;
      case TransformKind::kSigmoidRange: parts.push_back(ad::add_scalar(ad::scale(ad::sigmoid(x), s.hi - s.lo), s.lo)); break;
      case TransformKind::kSoftplus: parts.push_back(ad::softplus(x)); break;
      case TransformKind::kIdentity: parts.push_back(x); break;
    }
  }
  return ad::concat(parts, 0);
}

HyperparamState HyperparamState::from_domain(std::vector<std::string> names, std::vector<TransformSpec> transforms,
                                             const std::vector<double>& init_domain, double sigma) {
  require(names.size() == transforms.size() && names.size() == init_domain.size(), ErrorCode::kConfig,
          "hyperparameter names, transforms and initial values differ in length");
  require(sigma > 0 && std::isfinite(sigma), ErrorCode::kConfig, "perturbation scale must be positive");
  HyperparamState s;
  const std::size_t h = names.size();
  s.names = std::move(names);
  s.transforms = std::move(transforms);
  s.lambda = Tensor(Shape{h});
  for (std::size_t i = 0; i < h; ++i) {
    try {
      s.lambda[i] = inverse_transform(s.transforms[i], init_domain[i]);
    } catch (const Error& e) {
      fail(ErrorCode::kConfig, "hyperparameter '" + s.names[i] + "': " + e.what());
    }
  }
  s.lambda0 = s.lambda;
  s.log_sigma = Tensor(Shape{h}, std::log(sigma));
  return s;
}

Tensor HyperparamState::sigma() const {
  return map(log_sigma, [](double v) { return std::exp(v); });
}

void HyperparamState::validate() const {
  const std::size_t h = lambda.numel();
  require(lambda0.numel() == h && log_sigma.numel() == h && transforms.size() == h, ErrorCode::kShapeMismatch,
          "hyperparameter state fields differ in length");
  require(lambda.all_finite() && lambda0.all_finite() && log_sigma.all_finite(), ErrorCode::kNonFinite,
          "hyperparameter state holds non-finite values");
}

const char* to_string(HypernetKind kind) {
  switch (kind) {
    case HypernetKind::kUncentered: return "stn";
    case HypernetKind::kCentered: return "centered";
    case HypernetKind::kStructured: return "structured";
  }
  return "?";
}

HypernetKind hypernet_kind_from_string(const std::string& s) {
  if (s == "stn" || s == "uncentered") return HypernetKind::kUncentered;
  if (s == "centered" || s == "dstn") return HypernetKind::kCentered;
  if (s == "structured") return HypernetKind::kStructured;
  fail(ErrorCode::kConfig, "unknown hypernet kind '" + s + "' (expected stn, centered, dstn or structured)");
}

std::size_t structured_dense_param_count(std::size_t m_in, std::size_t m_out, std::size_t h) {
  return m_out * (2 * m_in + h) + m_out * (2 + h);
}

Hypernet Hypernet::uncentered(const Model& model, std::size_t h, RngStream& init) {
  Hypernet net(HypernetKind::kUncentered, model, h);
  net.params_.push_back({"Phi", Tensor::zeros({model.num_weights(), h}), ParamRole::kResponse});
  net.params_.push_back({"phi0", model.init_weights(init), ParamRole::kBase});
  return net;
}

Hypernet Hypernet::centered(const Model& model, std::size_t h, RngStream& init) {
  Hypernet net(HypernetKind::kCentered, model, h);
  net.params_.push_back({"Theta", Tensor::zeros({model.num_weights(), h}), ParamRole::kResponse});
  net.params_.push_back({"w0", model.init_weights(init), ParamRole::kBase});
  return net;
}

Hypernet Hypernet::structured(const Model& model, std::size_t h, RngStream& init) {
  Hypernet net(HypernetKind::kStructured, model, h);
  // Draw the base weights first so they match the plain model's init.
  const Tensor w = model.init_weights(init);
  for (const auto& b : model.blocks()) {
    const std::string prefix = "layer" + std::to_string(b.layer) + ".";
    const std::size_t units = b.shape[b.shape.size() == 4 ? 0 : (b.is_bias ? 0 : 1)];
    if (!b.is_bias) {
      const std::size_t fan_in = b.shape.size() == 4 ? b.shape[1] * b.shape[2] * b.shape[3] : b.shape[0];
      net.params_.push_back({prefix + "W_general", block_of(w, b), ParamRole::kBase});
      net.params_.push_back({prefix + "W_response", fan_in_uniform(init, b.shape, fan_in), ParamRole::kResponse});
      net.params_.push_back({prefix + "U", Tensor::zeros({units, h}), ParamRole::kResponse});
    } else {
      const auto& wb = model.blocks().at(&b - model.blocks().data() - 1);
      const std::size_t fan_in = wb.shape.size() == 4 ? wb.shape[1] * wb.shape[2] * wb.shape[3] : wb.shape[0];
      net.params_.push_back({prefix + "b_general", block_of(w, b), ParamRole::kBase});
      net.params_.push_back({prefix + "b_response", fan_in_uniform(init, b.shape, fan_in), ParamRole::kResponse});
      net.params_.push_back({prefix + "V", Tensor::zeros({units, h}), ParamRole::kResponse});
    }
  }
  return net;
}

Hypernet Hypernet::create(HypernetKind kind, const Model& model, std::size_t h, RngStream& init) {
  switch (kind) {
    case HypernetKind::kUncentered: return uncentered(model, h, init);
    case HypernetKind::kCentered: return centered(model, h, init);
    case HypernetKind::kStructured: return structured(model, h, init);
  }
  fail(ErrorCode::kInvalidArgument, "unknown hypernet kind");
}

std::size_t Hypernet::num_params() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

std::vector<Tensor> Hypernet::values() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

void Hypernet::set_values(const std::vector<Tensor>& values) {
  require(values.size() == params_.size(), ErrorCode::kShapeMismatch, "hypernet parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    require(values[i].shape() == params_[i].value.shape(), ErrorCode::kShapeMismatch,
            "parameter '" + params_[i].name + "' expects shape " + shape_str(params_[i].value.shape()) + ", got " +
                shape_str(values[i].shape()));
    params_[i].value = values[i];
  }
}

std::vector<Var> Hypernet::leaves(Tape& tape, bool requires_grad) const {
  std::vector<Var> out;
  for (const auto& p : params_) out.push_back(tape.leaf(p.value, requires_grad));
  return out;
}

Var Hypernet::structured_weights(std::span<const Var> p, Var delta, bool include_base, bool include_response) const {
  std::vector<Var> flat;
  std::size_t k = 0;
  for (const auto& b : model_.blocks()) {
    Var general = p[k], resp = p[k + 1], scales = p[k + 2];
    k += 3;
    Var piece;
    if (include_response) {
      Var s = ad::matvec(scales, delta);
      if (b.is_bias) {
        piece = ad::mul(s, resp);
      } else if (b.shape.size() == 4) {
        const Shape mat{b.shape[0], b.shape[1] * b.shape[2] * b.shape[3]};
        piece = ad::reshape(ad::row_scale(s, ad::reshape(resp, mat)), b.shape);
      } else {
        piece = ad::transpose(ad::row_scale(s, ad::transpose(resp)));
      }
      if (include_base) piece = ad::add(general, piece);
    } else {
      piece = general;
    }
    flat.push_back(ad::reshape(piece, {b.size()}));
  }
  return flat.size() == 1 ? flat.front() : ad::concat(flat, 0);
}

Var Hypernet::respond(std::span<const Var> p, Var lambda, Var lambda0) const {
  require(p.size() == params_.size(), ErrorCode::kShapeMismatch, "hypernet parameter count mismatch");
  require(lambda.value().numel() == h_, ErrorCode::kShapeMismatch,
          "lambda has " + std::to_string(lambda.value().numel()) + " entries, hypernet expects " + std::to_string(h_));
  switch (kind_) {
    case HypernetKind::kUncentered: return ad::add(ad::matvec(p[0], lambda), p[1]);
    case HypernetKind::kCentered: return ad::add(ad::matvec(p[0], ad::sub(lambda, lambda0)), p[1]);
    case HypernetKind::kStructured: return structured_weights(p, ad::sub(lambda, lambda0), true, true);
  }
  fail(ErrorCode::kInvalidArgument, "unknown hypernet kind");
}

Var Hypernet::base(std::span<const Var> p, Var lambda0) const {
  require(p.size() == params_.size(), ErrorCode::kShapeMismatch, "hypernet parameter count mismatch");
  switch (kind_) {
    case HypernetKind::kUncentered: return ad::add(ad::matvec(p[0], lambda0), p[1]);
    case HypernetKind::kCentered: return p[1];
    case HypernetKind::kStructured: return structured_weights(p, Var{}, true, false);
  }
  fail(ErrorCode::kInvalidArgument, "unknown hypernet kind");
}

Var Hypernet::response(std::span<const Var> p, Var delta) const {
  require(p.size() == params_.size(), ErrorCode::kShapeMismatch, "hypernet parameter count mismatch");
  require(delta.value().numel() == h_, ErrorCode::kShapeMismatch, "perturbation length does not match hypernet");
  switch (kind_) {
    case HypernetKind::kUncentered:
    case HypernetKind::kCentered: return ad::matvec(p[0], delta);
    case HypernetKind::kStructured: return structured_weights(p, delta, false, true);
  }
  fail(ErrorCode::kInvalidArgument, "unknown hypernet kind");
}

Tensor Hypernet::respond(const Tensor& lambda, const Tensor& lambda0) const {
  Tape tape;
  auto p = leaves(tape, false);
  return respond(p, tape.constant(lambda), tape.constant(lambda0)).value();
}

Tensor Hypernet::base(const Tensor& lambda0) const {
  Tape tape;
  auto p = leaves(tape, false);
  return base(p, tape.constant(lambda0)).value();
}

Tensor Hypernet::response(const Tensor& delta) const {
  Tape tape;
  auto p = leaves(tape, false);
  return response(p, tape.constant(delta)).value();
}

Tensor Hypernet::jacobian() const {
  const std::size_t m = num_weights();
  Tensor J(Shape{m, h_});
  for (std::size_t j = 0; j < h_; ++j) {
    Tensor e(Shape{h_});
    e[j] = 1.0;
    Tensor col = response(e);
    for (std::size_t i = 0; i < m; ++i) J.at(i, j) = col[i];
  }
  return J;
}

void Hypernet::zero_response() {
  for (auto& p : params_) {
    const auto& n = p.name;
    const bool scales = n == "Phi" || n == "Theta" || n.ends_with(".U") || n.ends_with(".V");
    if (scales) p.value = Tensor::zeros(p.value.shape());
  }
}

Tensor respond_uncentered(const Tensor& Phi, const Tensor& phi0, const Tensor& lambda) {
  require(Phi.rank() == 2 && Phi.rows() == phi0.numel() && Phi.cols() == lambda.numel(), ErrorCode::kShapeMismatch,
          "Phi " + shape_str(Phi.shape()) + " incompatible with phi0 " + shape_str(phi0.shape()) + " and lambda " +
              shape_str(lambda.shape()));
  return matvec(Phi, lambda) + phi0;
}

Tensor respond_centered(const Tensor& Theta, const Tensor& w0, const Tensor& lambda, const Tensor& lambda0) {
  require(lambda.same_shape(lambda0), ErrorCode::kShapeMismatch, "lambda and lambda0 differ in shape");
  require(Theta.rank() == 2 && Theta.rows() == w0.numel() && Theta.cols() == lambda.numel(),
          ErrorCode::kShapeMismatch,
          "Theta " + shape_str(Theta.shape()) + " incompatible with w0 " + shape_str(w0.shape()) + " and lambda " +
              shape_str(lambda.shape()));
  return matvec(Theta, lambda - lambda0) + w0;
}

Var linearized_forward(Tape& tape, const Model& model, Var w0, Var dw, Var x, const models::DropoutPlan& plan) {
  Var y = model.forward(tape, w0, x, plan);
  std::pair<Var, Var> seed{w0, dw};
  Var dy = tape.jvp(y, std::span(&seed, 1));
  return ad::add(y, dy);
}

Tensor predict_linearized(const Hypernet& net, const Tensor& x, const Tensor& lambda0, const Tensor& eps,
                          const models::DropoutMasks& masks) {
  require(net.kind() != HypernetKind::kUncentered, ErrorCode::kInvalidArgument,
          "linearized prediction needs a centered or structured hypernet");
  Tape tape;
  auto p = net.leaves(tape, false);
  Var w0 = net.base(p, tape.constant(lambda0));
  Var dw = net.response(p, tape.constant(eps));
  return linearized_forward(tape, net.model(), w0, dw, tape.constant(x), models::training_plan(masks)).value();
}

}  // namespace stn::hyper
