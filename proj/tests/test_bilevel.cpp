// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <map>

#include "stn/bilevel.hpp"
#include "stn/error.hpp"
#include "support.hpp"

using namespace stn;
using namespace stn::bilevel;
using hyper::HyperparamState;
using hyper::TransformSpec;

namespace {

Problem ridge_problem(std::uint64_t seed, std::size_t n = 24, std::size_t d = 3) {
  RngStream rng(seed, "data");
  Tensor w_true = testing::random_tensor(rng, {d});
  auto make = [&](std::size_t rows) {
    Tensor x = testing::random_tensor(rng, {rows, d});
    Tensor t = matvec(x, w_true);
    for (auto& v : t.data()) v += 0.3 * rng.normal();
    return models::Batch{x, t};
  };
  Problem p{models::Model::linear(d), {}, make(n), make(n / 2)};
  p.objective.regularizers = {{models::RegKind::kWeightDecay, 0, 0}};
  p.objective.n_train = n;
  return p;
}

Problem dropout_problem(std::uint64_t seed) {
  RngStream rng(seed, "data");
  auto model = models::Model::mlp(3, {4}, 1, models::Activation::kTanh);
  auto make = [&](std::size_t rows) {
    Tensor x = testing::random_tensor(rng, {rows, 3});
    Tensor t(Shape{rows});
    for (std::size_t i = 0; i < rows; ++i) t[i] = std::sin(x.at(i, 0)) + 0.5 * x.at(i, 1);
    return models::Batch{x, t};
  };
  Problem p{model, {}, make(20), make(10)};
  p.objective.regularizers = {{models::RegKind::kInputDropout, 0, 0}, {models::RegKind::kWeightDecay, 1, 0}};
  p.objective.n_train = 20;
  return p;
}

HyperparamState wd_state(double lambda, double sigma) {
  return HyperparamState::from_domain({"wd"}, {TransformSpec::exp()}, {lambda}, sigma);
}

HyperparamState dropout_state() {
  return HyperparamState::from_domain({"drop", "wd"}, {TransformSpec::sigmoid_range(0, 0.9), TransformSpec::exp()},
                                      {0.2, 0.01}, 0.5);
}

double responded_val_loss(const TrainState& s, const Problem& p, const Tensor& lambda) {
  Tensor w = s.net.respond(lambda, s.hp.lambda0);
  return models::validation_loss(p.model, p.objective, hyper::transform_all(s.hp.transforms, lambda), w, p.valid);
}

}  // namespace

TEST_CASE("entropy forms agree") {
  Tensor ls = Tensor::vector({-0.3, 0.4});
  ad::Tape tape;
  auto v = entropy(tape.leaf(ls));
  CHECK(v.value().item() == doctest::Approx(entropy(map(ls, [](double x) { return std::exp(x); }))));
}

TEST_CASE("expected perturbations reproduce the first moments") {
  RngStream rng(0, "p");
  Tensor sigma = Tensor::vector({0.5, 2.0});
  auto set = draw_perturbations(sigma, PerturbationMode::kExpected, rng);
  CHECK(set.eps.size() == 9);
  double wsum = 0, m2a = 0, m2b = 0, m4 = 0, cross = 0;
  for (std::size_t k = 0; k < set.eps.size(); ++k) {
    const double w = set.weights[k];
    wsum += w;
    m2a += w * set.eps[k][0] * set.eps[k][0];
    m2b += w * set.eps[k][1] * set.eps[k][1];
    m4 += w * std::pow(set.eps[k][0], 4);
    cross += w * set.eps[k][0] * set.eps[k][1];
  }
  CHECK(wsum == doctest::Approx(1.0));
  CHECK(m2a == doctest::Approx(0.25));
  CHECK(m2b == doctest::Approx(4.0));
  CHECK(m4 == doctest::Approx(3 * std::pow(0.5, 4)));
  CHECK(cross == doctest::Approx(0.0));
}

TEST_CASE("minibatches cover every example once per epoch") {
  auto p = ridge_problem(1, 12);
  BilevelConfig c;
  BatchCursor cur;
  RngStream rng(0, "batch");
  std::map<double, int> seen;
  c.batch_size = 5;
  for (int b = 0; b < 3; ++b) {
    auto batch = next_batch(cur, rng, p, c);
    CHECK(batch.size() == (b < 2 ? 5 : 2));
    for (double t : batch.t.data()) seen[t] += 1;
  }
  CHECK(seen.size() == 12);
}

TEST_CASE("hyper gradient matches central differences") {
  for (auto method : {Method::kStn, Method::kCentered, Method::kDstn}) {
    for (bool dropout : {false, true}) {
      CAPTURE(to_string(method));
      CAPTURE(dropout);
      auto p = dropout ? dropout_problem(2) : ridge_problem(2);
      BilevelConfig c;
      c.method = method;
      auto s = init_state(p, c, dropout ? dropout_state() : wd_state(0.1, 0.5));
      RngStream rng(4, "resp");
      for (auto& prm : s.net.params())
        if (prm.role == hyper::ParamRole::kResponse) prm.value = testing::random_tensor(rng, prm.value.shape(), -0.3, 0.3);
      s.hp.lambda0 = s.hp.lambda - 0.1 * Tensor::ones(s.hp.lambda.shape());
      Tensor g = hyper_gradient(s, p, c, Tensor::zeros(s.hp.lambda.shape()));
      for (std::size_t i = 0; i < g.numel(); ++i) {
        Tensor up = s.hp.lambda, down = s.hp.lambda;
        up[i] += 1e-5;
        down[i] -= 1e-5;
        const double fd = (responded_val_loss(s, p, up) - responded_val_loss(s, p, down)) / 2e-5;
        CHECK(g[i] == doctest::Approx(fd).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("sigma gradient matches central differences") {
  auto p = dropout_problem(3);
  BilevelConfig c;
  c.tau = 0.01;
  auto s = init_state(p, c, dropout_state());
  RngStream rng(5, "resp");
  s.net.params()[0].value = testing::random_tensor(rng, s.net.params()[0].value.shape(), -0.3, 0.3);
  Tensor et = Tensor::vector({0.7, -1.3});
  Tensor g = sigma_gradient(s, p, c, et);
  auto objective = [&](const Tensor& ls) {
    Tensor sig = map(ls, [](double v) { return std::exp(v); });
    return responded_val_loss(s, p, s.hp.lambda + sig * et) - c.tau * entropy(sig);
  };
  for (std::size_t i = 0; i < 2; ++i) {
    Tensor up = s.hp.log_sigma, down = s.hp.log_sigma;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    CHECK(g[i] == doctest::Approx((objective(up) - objective(down)) / 2e-5).epsilon(1e-5));
  }
}

TEST_CASE("schedule interleaves warm-up, inner and outer steps") {
  auto p = ridge_problem(4);
  BilevelConfig c;
  c.warmup_steps = 3;
  c.steps = 20;
  c.T_train = 5;
  c.T_valid = 2;
  auto s = init_state(p, c, wd_state(0.1, 0.5));
  auto recs = run(s, p, c);
  std::string pattern;
  for (const auto& r : recs) pattern += r.phase[0];
  CHECK(pattern == "wwwtttttvvtttttvvtttttvvtttttvv");
  for (std::size_t i = 0; i < recs.size(); ++i) CHECK(recs[i].step == i);
  // Warm-up leaves lambda and sigma alone.
  CHECK(recs[0].lambda_raw == recs[3].lambda_raw);
  CHECK(recs[0].sigma == recs[3].sigma);
  CHECK(s.hp.lambda0 == s.hp.lambda);
  CHECK(s.hyper_steps == 8);
  CHECK(s.sigma_steps == 8);
}

TEST_CASE("frozen sigma and disabled hyper steps") {
  auto p = ridge_problem(5);
  BilevelConfig c;
  c.steps = 20;
  c.T_train = 5;
  c.freeze_sigma = true;
  c.update_hyper = false;
  auto s = init_state(p, c, wd_state(0.1, 0.5));
  Tensor lam = s.hp.lambda, ls = s.hp.log_sigma;
  run(s, p, c);
  CHECK(s.hp.lambda == lam);
  CHECK(s.hp.log_sigma == ls);
}

TEST_CASE("zeroed response without hyper steps is plain training") {
  for (bool dropout : {false, true}) {
    for (auto kind : {optim::OptimizerKind::kSgd, optim::OptimizerKind::kAdam}) {
      auto p = dropout ? dropout_problem(6) : ridge_problem(6, 16);
      BilevelConfig c;
      c.method = Method::kDstn;
      c.inner = {kind, 0.05};
      c.steps = 30;
      c.batch_size = 5;
      c.freeze_sigma = true;
      c.update_hyper = false;
      c.train_response = false;
      auto s = init_state(p, c, dropout ? dropout_state() : wd_state(0.1, 1.0));
      s.net.zero_response();
      run(s, p, c);
      Tensor plain = train_plain(p, c, s.hp.transformed(), 30);
      CHECK(s.center_weights() == plain);
    }
  }
}

TEST_CASE("runs are deterministic and resumable") {
  auto p = dropout_problem(7);
  BilevelConfig c;
  c.steps = 30;
  c.T_train = 4;
  c.batch_size = 6;
  c.seed = 11;
  auto a = init_state(p, c, dropout_state());
  auto b = init_state(p, c, dropout_state());
  auto ra = run(a, p, c);
  auto rb = run(b, p, c);
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) CHECK(ra[i].lambda_raw == rb[i].lambda_raw);

  BilevelConfig half = c;
  half.steps = 13;
  auto r = init_state(p, c, dropout_state());
  run(r, p, half);
  run(r, p, c);
  CHECK(r.hp.lambda == a.hp.lambda);
  CHECK(r.center_weights() == a.center_weights());
  CHECK(r.records == ra.size());
}

TEST_CASE("non-finite training aborts with a snapshot") {
  auto p = ridge_problem(8);
  BilevelConfig c;
  c.inner = {optim::OptimizerKind::kSgd, 1e6};
  c.steps = 200;
  auto s = init_state(p, c, wd_state(0.1, 0.5));
  try {
    run(s, p, c);
    FAIL("expected abort");
  } catch (const TrainingAborted& e) {
    CHECK(e.code() == ErrorCode::kNonFinite);
    CHECK(e.last().lambda_raw.size() == 1);
  }
}

TEST_CASE("config validation") {
  BilevelConfig c;
  c.T_train = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.method = Method::kStn;
  c.structured = true;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK_THROWS_AS(method_from_string("sgd"), Error);
}

TEST_CASE("grid search enumerates within the budget") {
  auto p = ridge_problem(9);
  BilevelConfig c;
  c.steps = 20;
  std::vector<SearchDim> space = {{"wd", TransformSpec::exp(), 0.01, 1.0, {}}};
  auto r = baseline_search(SearchKind::kGrid, space, 5, p, c);
  REQUIRE(r.trials.size() == 5);
  CHECK(r.trials.front().lambda[0] == doctest::Approx(0.01));
  CHECK(r.trials.back().lambda[0] == doctest::Approx(1.0));
  for (const auto& t : r.trials) CHECK(r.best_val_loss <= t.val_loss);
  auto rr = baseline_search(SearchKind::kRandom, space, 4, p, c);
  CHECK(rr.trials.size() == 4);
  space[0].lo = -1.0;
  CHECK_THROWS_AS(baseline_search(SearchKind::kGrid, space, 4, p, c), Error);
}

TEST_CASE("centered response training reduces the perturbed loss") {
  auto p = ridge_problem(10);
  BilevelConfig c;
  c.method = Method::kDstn;
  c.inner = {optim::OptimizerKind::kSgd, 0.1};
  c.update_hyper = false;
  c.freeze_sigma = true;
  c.steps = 3000;
  c.T_train = 10000;
  c.perturbation = PerturbationMode::kExpected;
  auto s = init_state(p, c, HyperparamState::from_domain({"wd"}, {TransformSpec::identity()}, {0.5}, 1.0));
  run(s, p, c);
  // The base weights sit at the ridge solution and Theta at its slope.
  const double lam = 0.5;
  Tensor X = p.train.x;
  Tensor H = matmul(transpose(X), X) + lam * identity(3);
  Tensor w0 = s.center_weights();
  Tensor grad = matvec(H, w0) - matvec(transpose(X), p.train.t);
  CHECK(norm(grad) < 1e-3);
  Tensor slope = matvec(H, s.net.jacobian().reshaped({3})) + w0;
  CHECK(norm(slope) < 1e-3);
}
