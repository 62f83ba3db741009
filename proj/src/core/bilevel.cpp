// SPDX-License-Identifier: Apache-2.0
#include "stn/bilevel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "stn/error.hpp"

namespace stn::bilevel {

using ad::Tape;
using ad::Var;
using hyper::HypernetKind;
using hyper::ParamRole;

namespace {

double squared_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads) s += dot(g, g);
  return s;
}

void check_finite_params(const Hypernet& net, const char* where) {
  for (const auto& p : net.params())
    if (!p.value.all_finite())
      fail(ErrorCode::kNonFinite, std::string("parameter '") + p.name + "' became non-finite after " + where);
}

bool has_dropout(const RegularizedObjective& obj) {
  return std::any_of(obj.regularizers.begin(), obj.regularizers.end(), [](const models::Regularizer& r) {
    return r.kind == models::RegKind::kInputDropout || r.kind == models::RegKind::kActivationDropout;
  });
}

models::DropoutMasks masks_at(const Problem& problem, const Tensor& lambda_t, std::size_t batch_size, RngStream& rng) {
  if (!has_dropout(problem.objective)) return {};
  return models::sample_dropout_masks(problem.model, problem.objective, lambda_t, batch_size, rng);
}

Var linearized_training_loss(Tape& tape, const Problem& problem, Var lambda_t, Var w0, Var dw, const Batch& batch,
                             const models::DropoutMasks& masks) {
  Var y = hyper::linearized_forward(tape, problem.model, w0, dw, tape.constant(batch.x), models::training_plan(masks));
  Var fit = models::data_loss(tape, problem.objective.loss, y, batch.t);
  Var reg = models::penalty(tape, problem.model, problem.objective, lambda_t, ad::add(w0, dw));
  if (!fit.value().all_finite() || !reg.value().all_finite())
    fail(ErrorCode::kNonFinite, "non-finite value in linearized training loss");
  return ad::add(fit, reg);
}

Var linearized_validation_loss(Tape& tape, const Problem& problem, Var lambda_t, Var w0, Var dw) {
  auto plan = models::evaluation_plan(problem.model, problem.objective, lambda_t);
  Var y = hyper::linearized_forward(tape, problem.model, w0, dw, tape.constant(problem.valid.x), plan);
  Var fit = models::data_loss(tape, problem.objective.loss, y, problem.valid.t);
  if (!fit.value().all_finite()) fail(ErrorCode::kNonFinite, "non-finite value in linearized validation loss");
  return fit;
}

/// Responded validation loss at perturbed hyperparameters lambda + eps with
/// the hypernet centered at lambda0.
Var outer_objective(Tape& tape, const TrainState& state, const Problem& problem, const BilevelConfig& config,
                    std::span<const Var> p, Var lambda, Var lambda0, Var eps) {
  Var lam_hat = ad::add(lambda, eps);
  Var lam_t = hyper::transform_all(state.hp.transforms, lam_hat);
  const bool linear = config.linearize_outer && state.net.kind() != HypernetKind::kUncentered;
  if (linear) {
    Var w0 = state.net.base(p, lambda0);
    Var dw = state.net.response(p, ad::sub(lam_hat, lambda0));
    return linearized_validation_loss(tape, problem, lam_t, w0, dw);
  }
  Var w = state.net.respond(p, lam_hat, lambda0);
  return models::validation_loss(tape, problem.model, problem.objective, lam_t, w, problem.valid);
}

MetricsRecord snapshot(const TrainState& state, std::string phase) {
  MetricsRecord r;
  r.step = state.records;
  r.phase = std::move(phase);
  r.lambda_raw = state.hp.lambda.values();
  r.lambda = state.hp.transformed().values();
  r.sigma = state.hp.sigma().values();
  return r;
}

}  // namespace

const char* to_string(Method m) {
  switch (m) {
    case Method::kStn: return "stn";
    case Method::kCentered: return "centered";
    case Method::kDstn: return "dstn";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "stn") return Method::kStn;
  if (s == "centered") return Method::kCentered;
  if (s == "dstn") return Method::kDstn;
  fail(ErrorCode::kConfig, "unknown method '" + s + "' (expected stn, centered or dstn)");
}

void BilevelConfig::validate() const {
  inner.validate("inner optimizer");
  hyper.validate("hyper optimizer");
  sigma.validate("sigma optimizer");
  require(hyper.kind == optim::OptimizerKind::kRmsprop || hyper.kind == optim::OptimizerKind::kAdam ||
              hyper.kind == optim::OptimizerKind::kSgd,
          ErrorCode::kConfig, "hyper optimizer must be rmsprop, adam or sgd");
  require(T_train >= 1 && T_valid >= 1, ErrorCode::kConfig, "T_train and T_valid must be at least 1");
  require(tau >= 0 && std::isfinite(tau), ErrorCode::kConfig, "entropy weight tau must be >= 0");
  require(!structured || method == Method::kDstn, ErrorCode::kConfig, "structured hypernets are only used with dstn");
}

Streams::Streams(std::uint64_t seed)
    : init(seed, "init"),
      perturb(seed, "perturb"),
      dropout(seed, "dropout"),
      dropout_response(seed, "dropout_response"),
      batch(seed, "batch") {}

TrainState init_state(const Problem& problem, const BilevelConfig& config, HyperparamState hp) {
  config.validate();
  hp.validate();
  problem.objective.validate(problem.model, hp.size());
  require(problem.train.size() >= 1 && problem.valid.size() >= 1, ErrorCode::kConfig,
          "training and validation sets must be non-empty");
  Streams rng(config.seed);
  HypernetKind kind = HypernetKind::kCentered;
  if (config.method == Method::kStn) kind = HypernetKind::kUncentered;
  if (config.method == Method::kDstn && config.structured) kind = HypernetKind::kStructured;
  Hypernet net = Hypernet::create(kind, problem.model, hp.size(), rng.init);
  return TrainState{std::move(net), std::move(hp), Optimizer(config.inner), Optimizer(config.hyper),
                    Optimizer(config.sigma), std::move(rng), BatchCursor{}};
}

double entropy(const Tensor& sigma) {
  double h = 0.0;
  for (double s : sigma.data()) {
    require(s > 0, ErrorCode::kInvalidArgument, "entropy needs positive sigma");
    h += 0.5 * std::log(2 * std::numbers::pi * std::numbers::e * s * s);
  }
  return h;
}

Var entropy(Var log_sigma) {
  const double n = static_cast<double>(log_sigma.value().numel());
  return ad::add_scalar(ad::sum(log_sigma), 0.5 * n * std::log(2 * std::numbers::pi * std::numbers::e));
}

PerturbationSet draw_perturbations(const Tensor& sigma, PerturbationMode mode, RngStream& rng) {
  const std::size_t h = sigma.numel();
  PerturbationSet set;
  if (mode == PerturbationMode::kSample) {
    Tensor eps(Shape{h});
    for (std::size_t i = 0; i < h; ++i) eps[i] = sigma[i] * rng.normal();
    set.eps.push_back(std::move(eps));
    set.weights.push_back(1.0);
    return set;
  }
  require(h <= 8, ErrorCode::kConfig, "expected-perturbation mode supports at most 8 hyperparameters");
  const double nodes[3] = {0.0, std::sqrt(3.0), -std::sqrt(3.0)};
  const double weights[3] = {2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0};
  std::size_t total = 1;
  for (std::size_t i = 0; i < h; ++i) total *= 3;
  for (std::size_t k = 0; k < total; ++k) {
    Tensor eps(Shape{h});
    double w = 1.0;
    std::size_t code = k;
    for (std::size_t i = 0; i < h; ++i) {
      eps[i] = sigma[i] * nodes[code % 3];
      w *= weights[code % 3];
      code /= 3;
    }
    set.eps.push_back(std::move(eps));
    set.weights.push_back(w);
  }
  return set;
}

Batch next_batch(BatchCursor& state, RngStream& rng, const Problem& problem, const BilevelConfig& config) {
  const std::size_t n = problem.train.size();
  const std::size_t bs = config.batch_size;
  if (bs == 0 || bs >= n) return problem.train;
  if (state.order.size() != n || state.cursor >= n) {
    state.order.resize(n);
    for (std::size_t i = 0; i < n; ++i) state.order[i] = i;
    for (std::size_t i = n - 1; i > 0; --i) std::swap(state.order[i], state.order[rng.index(i + 1)]);
    state.cursor = 0;
  }
  // The last batch of an epoch may be short.
  const std::size_t rows = std::min(bs, n - state.cursor);
  const std::size_t d = problem.train.x.cols();
  Tensor x(Shape{rows, d});
  Tensor t(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t src = state.order[state.cursor + r];
    for (std::size_t c = 0; c < d; ++c) x.at(r, c) = problem.train.x.at(src, c);
    t[r] = problem.train.t[src];
  }
  state.cursor += rows;
  return Batch{std::move(x), std::move(t)};
}

StepInfo stn_inner_step(TrainState& state, const Problem& problem, const BilevelConfig& config, const Batch& batch) {
  auto set = draw_perturbations(state.hp.sigma(), config.perturbation, state.rng.perturb);
  Tape tape;
  auto p = state.net.leaves(tape, true);
  Var lam0 = tape.constant(state.hp.lambda0);
  Var total;
  for (std::size_t k = 0; k < set.eps.size(); ++k) {
    Tensor lam_hat = state.hp.lambda + set.eps[k];
    Tensor lam_t = hyper::transform_all(state.hp.transforms, lam_hat);
    auto masks = masks_at(problem, lam_t, batch.size(), state.rng.dropout);
    Var w = state.net.respond(p, tape.constant(lam_hat), lam0);
    Var loss = models::training_loss(tape, problem.model, problem.objective, tape.constant(lam_t), w, batch, masks);
    Var term = set.weights[k] == 1.0 ? loss : ad::scale(loss, set.weights[k]);
    total = total.valid() ? ad::add(total, term) : term;
  }
  auto grads = tape.backward(total);
  std::vector<Tensor> g;
  for (const auto& v : p) g.push_back(grads.of(v));
  for (std::size_t i = 0; i < p.size(); ++i) state.inner_opt.step(i, state.net.params()[i].value, g[i]);
  check_finite_params(state.net, "an inner step");
  state.inner_steps += 1;
  return {total.value().item(), std::sqrt(squared_norm(g))};
}

StepInfo dstn_inner_step(TrainState& state, const Problem& problem, const BilevelConfig& config, const Batch& batch) {
  require(state.net.kind() != HypernetKind::kUncentered, ErrorCode::kInvalidArgument,
          "the split update needs a centered or structured hypernet");
  auto set = draw_perturbations(state.hp.sigma(), config.perturbation, state.rng.perturb);
  auto& params = state.net.params();
  StepInfo info;
  double sq = 0.0;
  {
    Tape tape;
    std::vector<Var> p;
    for (const auto& prm : params) p.push_back(tape.leaf(prm.value, prm.role == ParamRole::kBase));
    Tensor lam_t = state.hp.transformed();
    auto masks = masks_at(problem, lam_t, batch.size(), state.rng.dropout);
    Var w = state.net.base(p, tape.constant(state.hp.lambda0));
    Var loss = models::training_loss(tape, problem.model, problem.objective, tape.constant(lam_t), w, batch, masks);
    auto grads = tape.backward(loss);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (params[i].role != ParamRole::kBase) continue;
      Tensor g = grads.of(p[i]);
      sq += dot(g, g);
      state.inner_opt.step(i, params[i].value, g);
    }
    info.loss = loss.value().item();
  }
  if (config.train_response) {
    Tape tape;
    std::vector<Var> p;
    for (const auto& prm : params) p.push_back(tape.leaf(prm.value, prm.role == ParamRole::kResponse));
    Var lam0 = tape.constant(state.hp.lambda0);
    Var total;
    for (std::size_t k = 0; k < set.eps.size(); ++k) {
      Tensor lam_t = hyper::transform_all(state.hp.transforms, state.hp.lambda + set.eps[k]);
      auto masks = masks_at(problem, lam_t, batch.size(), state.rng.dropout_response);
      Var w0 = state.net.base(p, lam0);
      Var dw = state.net.response(p, tape.constant(set.eps[k]));
      Var loss = config.linearize
                     ? linearized_training_loss(tape, problem, tape.constant(lam_t), w0, dw, batch, masks)
                     : models::training_loss(tape, problem.model, problem.objective, tape.constant(lam_t),
                                             ad::add(w0, dw), batch, masks);
      Var term = set.weights[k] == 1.0 ? loss : ad::scale(loss, set.weights[k]);
      total = total.valid() ? ad::add(total, term) : term;
    }
    auto grads = tape.backward(total);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (params[i].role != ParamRole::kResponse) continue;
      Tensor g = grads.of(p[i]);
      sq += dot(g, g);
      state.inner_opt.step(i, params[i].value, g);
    }
  }
  check_finite_params(state.net, "an inner step");
  state.inner_steps += 1;
  info.grad_norm = std::sqrt(sq);
  return info;
}

StepInfo inner_step(TrainState& state, const Problem& problem, const BilevelConfig& config, const Batch& batch) {
  if (config.method == Method::kDstn) return dstn_inner_step(state, problem, config, batch);
  return stn_inner_step(state, problem, config, batch);
}

Tensor hyper_gradient(const TrainState& state, const Problem& problem, const BilevelConfig& config,
                      const Tensor& eps) {
  Tape tape;
  auto p = state.net.leaves(tape, false);
  Var lam = tape.leaf(state.hp.lambda);
  Var loss = outer_objective(tape, state, problem, config, p, lam, tape.constant(state.hp.lambda0), tape.constant(eps));
  return tape.backward(loss).of(lam);
}

StepInfo hyper_step(TrainState& state, const Problem& problem, const BilevelConfig& config, const Tensor& eps_tilde) {
  Tensor eps = state.hp.sigma() * eps_tilde;
  Tensor g = hyper_gradient(state, problem, config, eps);
  require(g.all_finite(), ErrorCode::kNonFinite, "non-finite hyperparameter gradient");
  state.hyper_opt.step(0, state.hp.lambda, g);
  require(state.hp.lambda.all_finite(), ErrorCode::kNonFinite, "hyperparameters became non-finite");
  state.hp.lambda0 = state.hp.lambda;
  state.hyper_steps += 1;
  return {kMissing, norm(g)};
}

Tensor sigma_gradient(const TrainState& state, const Problem& problem, const BilevelConfig& config,
                      const Tensor& eps_tilde) {
  Tape tape;
  auto p = state.net.leaves(tape, false);
  Var log_sigma = tape.leaf(state.hp.log_sigma);
  Var eps = ad::mul(ad::exp(log_sigma), tape.constant(eps_tilde));
  Var lam = tape.constant(state.hp.lambda);
  Var fit = outer_objective(tape, state, problem, config, p, lam, lam, eps);
  Var loss = ad::sub(fit, ad::scale(entropy(log_sigma), config.tau));
  return tape.backward(loss).of(log_sigma);
}

StepInfo sigma_step(TrainState& state, const Problem& problem, const BilevelConfig& config, const Tensor& eps_tilde) {
  Tensor g = sigma_gradient(state, problem, config, eps_tilde);
  require(g.all_finite(), ErrorCode::kNonFinite, "non-finite perturbation-scale gradient");
  state.sigma_opt.step(0, state.hp.log_sigma, g);
  require(state.hp.log_sigma.all_finite(), ErrorCode::kNonFinite, "perturbation scale became non-finite");
  state.sigma_steps += 1;
  return {kMissing, norm(g)};
}

double center_validation_loss(const TrainState& state, const Problem& problem) {
  return models::validation_loss(problem.model, problem.objective, state.hp.transformed(), state.center_weights(),
                                 problem.valid);
}

double gradient_alignment_at_center(const TrainState& state, const Problem& problem) {
  Tensor w = state.center_weights();
  Tensor lam_t = state.hp.transformed();
  Tensor gt = models::training_gradient(problem.model, problem.objective, lam_t, w, problem.train);
  Tensor gv = models::validation_gradient(problem.model, problem.objective, lam_t, w, problem.valid);
  const double nt = norm(gt), nv = norm(gv);
  if (nt == 0 || nv == 0) return kMissing;
  return dot(gt, gv) / (nt * nv);
}

void run(TrainState& state, const Problem& problem, const BilevelConfig& config, const RecordSink& sink) {
  config.validate();
  auto emit = [&](MetricsRecord r) {
    state.records += 1;
    if (sink) sink(r);
  };
  try {
    while (true) {
      const bool warm = state.inner_steps < config.warmup_steps;
      const std::size_t post = warm ? 0 : state.inner_steps - config.warmup_steps;
      const std::size_t due = (post / config.T_train) * config.T_valid;
      if (state.outer_iterations < due) {
        Tensor eps_tilde(Shape{state.hp.size()});
        for (auto& v : eps_tilde.data()) v = state.rng.perturb.normal();
        MetricsRecord r = snapshot(state, "valid");
        if (config.update_hyper) r.hyper_grad_norm = hyper_step(state, problem, config, eps_tilde).grad_norm;
        if (!config.freeze_sigma) r.sigma_grad_norm = sigma_step(state, problem, config, eps_tilde).grad_norm;
        r.lambda_raw = state.hp.lambda.values();
        r.lambda = state.hp.transformed().values();
        r.sigma = state.hp.sigma().values();
        r.val_loss = center_validation_loss(state, problem);
        if (!std::isfinite(r.val_loss)) fail(ErrorCode::kNonFinite, "non-finite validation loss");
        if (config.diagnostics) r.alignment = gradient_alignment_at_center(state, problem);
        state.outer_iterations += 1;
        emit(std::move(r));
        continue;
      }
      if (!warm && post >= config.steps) break;
      Batch batch = next_batch(state.batches, state.rng.batch, problem, config);
      MetricsRecord r = snapshot(state, warm ? "warmup" : "train");
      StepInfo info = inner_step(state, problem, config, batch);
      if (!std::isfinite(info.loss)) fail(ErrorCode::kNonFinite, "non-finite training loss");
      r.train_loss = info.loss;
      r.inner_grad_norm = info.grad_norm;
      emit(std::move(r));
    }
  } catch (const TrainingAborted&) {
    throw;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNonFinite) throw;
    throw TrainingAborted(std::string(e.what()) + " at inner step " + std::to_string(state.inner_steps),
                          snapshot(state, "abort"));
  }
}

std::vector<MetricsRecord> run(TrainState& state, const Problem& problem, const BilevelConfig& config) {
  std::vector<MetricsRecord> out;
  run(state, problem, config, [&](const MetricsRecord& r) { out.push_back(r); });
  return out;
}

Tensor train_plain(const Problem& problem, const BilevelConfig& config, const Tensor& lambda_transformed,
                   std::size_t steps) {
  Streams rng(config.seed);
  Tensor w = problem.model.init_weights(rng.init);
  Optimizer opt(config.inner);
  BatchCursor cursor;
  for (std::size_t s = 0; s < steps; ++s) {
    Batch batch = next_batch(cursor, rng.batch, problem, config);
    auto masks = masks_at(problem, lambda_transformed, batch.size(), rng.dropout);
    Tensor g = models::training_gradient(problem.model, problem.objective, lambda_transformed, w, batch, masks);
    opt.step(0, w, g);
    require(w.all_finite(), ErrorCode::kNonFinite, "weights became non-finite in plain training");
  }
  return w;
}

SearchKind search_kind_from_string(const std::string& s) {
  if (s == "grid") return SearchKind::kGrid;
  if (s == "random") return SearchKind::kRandom;
  fail(ErrorCode::kConfig, "unknown search kind '" + s + "' (expected grid or random)");
}

SearchResult baseline_search(SearchKind kind, const std::vector<SearchDim>& space, std::size_t budget,
                             const Problem& problem, const BilevelConfig& config) {
  require(!space.empty(), ErrorCode::kConfig, "search space is empty");
  require(budget >= 1, ErrorCode::kConfig, "search budget must be at least 1");
  for (const auto& d : space) {
    require(d.lo <= d.hi, ErrorCode::kConfig, "search bounds for '" + d.name + "' are reversed");
    auto [ilo, ihi] = d.transform.image();
    auto inside = [&](double v) { return v >= ilo && v <= ihi; };
    require(inside(d.lo) && inside(d.hi), ErrorCode::kConfig,
            "search bounds for '" + d.name + "' leave the transform image");
    for (double v : d.values)
      require(inside(v), ErrorCode::kConfig, "grid value for '" + d.name + "' leaves the transform image");
  }
  std::vector<std::vector<double>> candidates;
  if (kind == SearchKind::kGrid) {
    std::size_t k = 1;
    auto fits = [&](std::size_t c) {
      double total = 1;
      for (std::size_t i = 0; i < space.size(); ++i) total *= static_cast<double>(c);
      return total <= static_cast<double>(budget);
    };
    while (fits(k + 1)) ++k;
    std::vector<std::vector<double>> axes;
    for (const auto& d : space) {
      if (!d.values.empty()) {
        axes.push_back(d.values);
        continue;
      }
      std::vector<double> a;
      if (k == 1) a.push_back(0.5 * (d.lo + d.hi));
      for (std::size_t i = 0; k > 1 && i < k; ++i)
        a.push_back(d.lo + (d.hi - d.lo) * static_cast<double>(i) / static_cast<double>(k - 1));
      axes.push_back(a);
    }
    std::vector<std::size_t> idx(space.size(), 0);
    while (true) {
      std::vector<double> c;
      for (std::size_t i = 0; i < space.size(); ++i) c.push_back(axes[i][idx[i]]);
      candidates.push_back(c);
      if (candidates.size() >= budget) break;
      std::size_t i = space.size();
      while (i > 0) {
        --i;
        if (++idx[i] < axes[i].size()) break;
        idx[i] = 0;
        if (i == 0) i = space.size() + 1;
      }
      if (i == space.size() + 1) break;
    }
  } else {
    RngStream rng(config.seed, "search");
    for (std::size_t b = 0; b < budget; ++b) {
      std::vector<double> c;
      for (const auto& d : space)
        c.push_back(d.values.empty() ? rng.uniform(d.lo, d.hi) : d.values[rng.index(d.values.size())]);
      candidates.push_back(c);
    }
  }

  SearchResult result;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    Tensor lam_t = Tensor::vector(candidates[i]);
    Tensor w = train_plain(problem, config, lam_t, config.warmup_steps + config.steps);
    double v = models::validation_loss(problem.model, problem.objective, lam_t, w, problem.valid);
    result.trials.push_back({candidates[i], v});
    if (i == 0 || v < result.best_val_loss) {
      result.best_val_loss = v;
      result.best = candidates[i];
      result.best_index = i;
    }
  }
  return result;
}

QuadraticDescent quadratic_theta_descent(const std::function<Var(Var, Var)>& inner_loss, const Tensor& lambda0,
                                         const Tensor& w0, double sigma, double lr, std::size_t steps, RngStream& rng,
                                         const std::function<bool(const Tensor&)>& stop) {
  const std::size_t h = lambda0.numel(), m = w0.numel();
  QuadraticDescent out{Tensor::zeros({m, h}), 0};
  for (std::size_t s = 0; s < steps; ++s) {
    Tensor eps(Shape{h});
    for (auto& v : eps.data()) v = sigma * rng.normal();
    Tape tape;
    Var theta = tape.leaf(out.theta);
    Var e = tape.constant(eps);
    Var w = ad::add(tape.constant(w0), ad::matvec(theta, e));
    Var loss = inner_loss(ad::add(tape.constant(lambda0), e), w);
    Tensor g = tape.backward(loss).of(theta);
    out.theta = out.theta - lr * g;
    out.steps = s + 1;
    if (stop && stop(out.theta)) break;
  }
  return out;
}

}  // namespace stn::bilevel
