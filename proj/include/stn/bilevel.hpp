// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "stn/error.hpp"
#include "stn/hypernet.hpp"
#include "stn/models.hpp"
#include "stn/optim.hpp"
#include "stn/rng.hpp"

namespace stn::bilevel {

using hyper::HyperparamState;
using hyper::Hypernet;
using models::Batch;
using models::Model;
using models::RegularizedObjective;
using optim::Optimizer;
using optim::OptimizerSpec;

/// stn: uncentered hypernet trained jointly on the perturbed objective.
/// centered: centered hypernet, same joint perturbed objective.
/// dstn: centered (or structured) hypernet, split objectives, linearized
/// prediction for the response parameters.
enum class Method { kStn, kCentered, kDstn };

const char* to_string(Method m);
Method method_from_string(const std::string& s);

/// kSample draws one perturbation per step; kExpected replaces the draw by
/// a three-point Gauss-Hermite rule per dimension, which integrates the
/// perturbed objective exactly when it is a polynomial of degree <= 5 in eps.
enum class PerturbationMode { kSample, kExpected };

struct BilevelConfig {
  Method method = Method::kDstn;
  bool structured = false;  // dstn only: structured instead of full Theta
  OptimizerSpec inner{optim::OptimizerKind::kSgd, 0.01};
  OptimizerSpec hyper{optim::OptimizerKind::kRmsprop, 0.003};
  OptimizerSpec sigma{optim::OptimizerKind::kRmsprop, 0.003};
  std::size_t T_train = 10;
  std::size_t T_valid = 1;
  double tau = 0.001;
  std::size_t warmup_steps = 0;
  std::size_t steps = 1000;       // inner steps after warm-up
  std::size_t batch_size = 0;     // 0: full batch
  bool freeze_sigma = false;
  bool train_response = true;
  bool update_hyper = true;
  bool linearize = true;          // dstn response update through the JVP
  bool linearize_outer = false;   // use the linearized prediction in outer steps too
  PerturbationMode perturbation = PerturbationMode::kSample;
  bool diagnostics = true;        // gradient alignment per outer step
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const BilevelConfig&, const BilevelConfig&) = default;
};

struct Problem {
  Model model;
  RegularizedObjective objective;
  Batch train;
  Batch valid;
};

/// Named random substreams of one run.
struct Streams {
  RngStream init, perturb, dropout, dropout_response, batch;
  explicit Streams(std::uint64_t seed = 0);
};

struct BatchCursor {
  std::vector<std::size_t> order;  // current epoch permutation
  std::size_t cursor = 0;
};

struct TrainState {
  Hypernet net;
  HyperparamState hp;
  Optimizer inner_opt;
  Optimizer hyper_opt;
  Optimizer sigma_opt;
  Streams rng;
  BatchCursor batches;
  std::size_t inner_steps = 0;
  std::size_t outer_iterations = 0;
  std::size_t hyper_steps = 0;
  std::size_t sigma_steps = 0;
  std::size_t records = 0;

  /// Weights at the current center.
  Tensor center_weights() const { return net.base(hp.lambda0); }
};

TrainState init_state(const Problem& problem, const BilevelConfig& config, HyperparamState hp);

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

struct MetricsRecord {
  std::size_t step = 0;
  std::string phase;  // warmup | train | valid
  double train_loss = kMissing;
  double val_loss = kMissing;
  std::vector<double> lambda_raw;
  std::vector<double> lambda;
  std::vector<double> sigma;
  double inner_grad_norm = kMissing;
  double hyper_grad_norm = kMissing;
  double sigma_grad_norm = kMissing;
  double alignment = kMissing;
};

/// Diagonal Gaussian differential entropy: sum_i 1/2 ln(2 pi e sigma_i^2).
double entropy(const Tensor& sigma);
ad::Var entropy(ad::Var log_sigma);

/// Perturbation samples and weights for one step.
struct PerturbationSet {
  std::vector<Tensor> eps;
  std::vector<double> weights;
};
PerturbationSet draw_perturbations(const Tensor& sigma, PerturbationMode mode, RngStream& rng);

/// Next minibatch in epoch order (the last one of an epoch may be short);
/// the full set when batch_size is 0.
Batch next_batch(BatchCursor& cursor, RngStream& rng, const Problem& problem, const BilevelConfig& config);

struct StepInfo {
  double loss = kMissing;
  double grad_norm = kMissing;
};

/// One joint update of all hypernet parameters on the perturbed training
/// objective (uncentered or centered parameterization).
StepInfo stn_inner_step(TrainState& state, const Problem& problem, const BilevelConfig& config, const Batch& batch);
/// Split update: base parameters on the unperturbed objective, then the
/// response parameters on the perturbed (linearized) objective.
StepInfo dstn_inner_step(TrainState& state, const Problem& problem, const BilevelConfig& config, const Batch& batch);
StepInfo inner_step(TrainState& state, const Problem& problem, const BilevelConfig& config, const Batch& batch);

/// Gradient of the responded validation loss at lambda (lambda0 held at its
/// current value) for unit-variance noise eps_tilde scaled by sigma.
Tensor hyper_gradient(const TrainState& state, const Problem& problem, const BilevelConfig& config,
                      const Tensor& eps);
StepInfo hyper_step(TrainState& state, const Problem& problem, const BilevelConfig& config, const Tensor& eps_tilde);
/// Gradient in log sigma of L_V(lambda + sigma*eps_tilde) - tau H(sigma).
Tensor sigma_gradient(const TrainState& state, const Problem& problem, const BilevelConfig& config,
                      const Tensor& eps_tilde);
StepInfo sigma_step(TrainState& state, const Problem& problem, const BilevelConfig& config, const Tensor& eps_tilde);

/// Validation loss of the center weights at the current hyperparameters.
double center_validation_loss(const TrainState& state, const Problem& problem);

/// Cosine between training and validation gradients at the center weights.
double gradient_alignment_at_center(const TrainState& state, const Problem& problem);

using RecordSink = std::function<void(const MetricsRecord&)>;

/// Non-finite loss during a run. Carries the state snapshot at failure.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, MetricsRecord last) : Error(ErrorCode::kNonFinite, what), last_(std::move(last)) {}
  const MetricsRecord& last() const { return last_; }

 private:
  MetricsRecord last_;
};

/// Warm-up, then cycles of T_train inner steps and T_valid outer steps until
/// `config.steps` post-warm-up inner steps are done. Resumes from whatever
/// counters `state` holds.
void run(TrainState& state, const Problem& problem, const BilevelConfig& config, const RecordSink& sink);
std::vector<MetricsRecord> run(TrainState& state, const Problem& problem, const BilevelConfig& config);

/// Plain training of the model weights at fixed hyperparameters with the same
/// batch and dropout streams a bilevel run would use.
Tensor train_plain(const Problem& problem, const BilevelConfig& config, const Tensor& lambda_transformed,
                   std::size_t steps);

struct SearchDim {
  std::string name;
  hyper::TransformSpec transform;
  double lo = 0.0;  // domain units
  double hi = 1.0;
  std::vector<double> values;  // explicit grid, overrides lo/hi
};

enum class SearchKind { kGrid, kRandom };
SearchKind search_kind_from_string(const std::string& s);

struct SearchTrial {
  std::vector<double> lambda;  // domain units
  double val_loss = kMissing;
};

struct SearchResult {
  std::vector<double> best;
  double best_val_loss = kMissing;
  std::size_t best_index = 0;
  std::vector<SearchTrial> trials;
};

/// Trains one model per candidate for `config.warmup_steps + config.steps`
/// plain steps and keeps the lowest validation loss (first wins on ties).
SearchResult baseline_search(SearchKind kind, const std::vector<SearchDim>& space, std::size_t budget,
                             const Problem& problem, const BilevelConfig& config);

/// Gradient descent on the sampled response objective
/// L(lambda0 + eps, w0 + Theta eps) of a quadratic inner problem, from Theta = 0.
struct QuadraticDescent {
  Tensor theta;
  std::size_t steps = 0;
};
QuadraticDescent quadratic_theta_descent(const std::function<ad::Var(ad::Var lambda, ad::Var w)>& inner_loss,
                                         const Tensor& lambda0, const Tensor& w0, double sigma, double lr,
                                         std::size_t steps, RngStream& rng,
                                         const std::function<bool(const Tensor&)>& stop = {});

}  // namespace stn::bilevel
