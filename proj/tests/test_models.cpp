// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "stn/error.hpp"
#include "stn/models.hpp"
#include "support.hpp"

using namespace stn;
using namespace stn::models;
using ad::Tape;
using ad::Var;

namespace {

RegularizedObjective ridge_objective(std::size_t n) {
  RegularizedObjective obj;
  obj.regularizers = {{RegKind::kWeightDecay, 0, 0}};
  obj.n_train = n;
  return obj;
}

}  // namespace

TEST_CASE("identity linear forward") {
  Model m({DenseLayer{2, 2, Activation::kIdentity, false}});
  Tensor w = Tensor::vector({1, 0, 0, 1});
  CHECK(forward(m, Tensor::matrix({{1, 2}}), w) == Tensor::matrix({{1, 2}}));
}

TEST_CASE("all-drop mask leaves the bias path") {
  Model m({DenseLayer{3, 2, Activation::kIdentity, true}});
  Tensor w = Tensor::vector({1, 2, 3, 4, 5, 6, 0.5, -0.5});
  DropoutMasks masks{{Tensor::zeros({1, 3})}};
  CHECK(forward(m, Tensor::matrix({{1, 1, 1}}), w, masks) == Tensor::matrix({{0.5, -0.5}}));
}

TEST_CASE("MLP forward equals hand composition") {
  RngStream rng(1, "mlp");
  auto m = Model::mlp(3, {4}, 2, Activation::kTanh);
  Tensor w = m.init_weights(rng);
  Tensor x = testing::random_tensor(rng, {5, 3});
  Tensor W1 = slice(w, 0, 0, 12).reshaped({3, 4});
  Tensor b1 = slice(w, 0, 12, 4);
  Tensor W2 = slice(w, 0, 16, 8).reshaped({4, 2});
  Tensor b2 = slice(w, 0, 24, 2);
  Tensor h = map(broadcast_zip(matmul(x, W1), b1, std::plus<>()), [](double v) { return std::tanh(v); });
  Tensor y = broadcast_zip(matmul(h, W2), b2, std::plus<>());
  CHECK(forward(m, x, w) == y);
}

TEST_CASE("shape mismatch in forward") {
  auto m = Model::linear(3);
  CHECK_THROWS_AS(forward(m, Tensor::matrix({{1, 2}}), Tensor::zeros({3})), Error);
  CHECK_THROWS_AS(Model({DenseLayer{2, 3}, DenseLayer{4, 1}}), Error);
}

TEST_CASE("ridge training and validation loss") {
  Tensor X = Tensor::matrix({{1, 0}, {0, 2}, {1, 1}});
  Tensor t = Tensor::vector({1, 2, 2});
  auto m = Model::linear(2);
  auto obj = ridge_objective(3);
  Batch b{X, t};
  CHECK(training_loss(m, obj, Tensor::vector({5.0}), Tensor::zeros({2}), b) == doctest::Approx(9.0 / 6));
  Tensor w = Tensor::vector({0.3, -0.7});
  const double lam = std::exp(0.4);
  Tensor r = matvec(X, w) - t;
  double expected = dot(r, r) / 6 + lam * dot(w, w) / 6;
  CHECK(training_loss(m, obj, Tensor::vector({lam}), w, b) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(validation_loss(m, obj, Tensor::vector({lam}), w, b) == doctest::Approx(dot(r, r) / 6).epsilon(1e-14));
  CHECK(validation_loss(m, obj, Tensor::vector({lam}), Tensor::vector({1, 1}), Batch{X, matvec(X, Tensor::vector({1, 1}))}) == 0.0);

  obj.scaling = PenaltyScaling::kUnscaled;
  CHECK(training_loss(m, obj, Tensor::vector({lam}), w, b) ==
        doctest::Approx(dot(r, r) / 6 + lam * dot(w, w) / 2).epsilon(1e-14));
}

TEST_CASE("training loss monotone in weight decay") {
  auto m = Model::linear(2);
  auto obj = ridge_objective(3);
  Batch b{Tensor::matrix({{1, 0}, {0, 2}, {1, 1}}), Tensor::vector({1, 2, 2})};
  double prev = -1;
  for (double lam : {0.0, 0.1, 1.0, 10.0}) {
    double l = training_loss(m, obj, Tensor::vector({lam}), Tensor::vector({0.2, 0.1}), b);
    CHECK(l >= prev);
    prev = l;
  }
}

TEST_CASE("weight-decay validation gradient does not depend on lambda") {
  auto m = Model::linear(2);
  auto obj = ridge_objective(3);
  Batch b{Tensor::matrix({{1, 0}, {0, 2}, {1, 1}}), Tensor::vector({1, 2, 2})};
  Tape tape;
  Var lam = tape.leaf(Tensor::vector({0.7}));
  Var loss = validation_loss(tape, m, obj, lam, tape.constant(Tensor::vector({0.2, 0.1})), b);
  CHECK(tape.backward(loss).of(lam) == Tensor::zeros({1}));
}

TEST_CASE("cross entropy") {
  Tape tape;
  Var logits = tape.constant(Tensor::matrix({{0, 0}, {1000, 0}}));
  double l = data_loss(tape, LossKind::kCrossEntropy, logits, Tensor::vector({1, 0})).value().item();
  CHECK(l == doctest::Approx(std::log(2.0) / 2));
  CHECK_THROWS_AS(data_loss(tape, LossKind::kCrossEntropy, logits, Tensor::vector({2, 0})), Error);
}

TEST_CASE("dropout masks") {
  RngStream rng(2, "dropout");
  auto all = sample_dropout_masks({0.0}, {{4, 5}}, rng);
  CHECK(*all.masks[0] == Tensor::ones({4, 5}));
  CHECK_THROWS_AS(sample_dropout_masks({1.0}, {{1, 1}}, rng), Error);
  CHECK_THROWS_AS(sample_dropout_masks({-0.1}, {{1, 1}}, rng), Error);

  auto nearly = sample_dropout_masks({1.0 - 1e-9}, {{100, 100}}, rng);
  CHECK(sum(*nearly.masks[0]) <= 1.0);

  const double rate = 0.3;
  const std::size_t n = 100000;
  auto big = sample_dropout_masks({rate}, {{n, 1}}, rng);
  const double keep = sum(*big.masks[0]) / n;
  const double sd = std::sqrt(rate * (1 - rate) / n);
  CHECK(std::abs(keep - (1 - rate)) <= 3 * sd);
}

TEST_CASE("evaluation mode scales by keep probability") {
  auto m = Model::linear(2);
  RegularizedObjective obj;
  obj.regularizers = {{RegKind::kInputDropout, 0, 0}};
  Tensor w = Tensor::vector({1, 2});
  Batch b{Tensor::matrix({{1, 1}}), Tensor::vector({0})};
  CHECK(validation_loss(m, obj, Tensor::vector({0.25}), w, b) == doctest::Approx(0.5 * 2.25 * 2.25));
}

TEST_CASE("jacobian norm penalty") {
  auto net = Model::linear_network(3, 2, 3);
  Tensor eye = identity(3);
  std::vector<double> w;
  for (int k = 0; k < 3; ++k) w.insert(w.end(), eye.values().begin(), eye.values().end());
  const double lam = std::exp(0.5);
  CHECK(jacobian_norm_penalty(net, Tensor::vector(w), lam, 10) == doctest::Approx(lam * 3 / 20));

  Model single({DenseLayer{2, 2, Activation::kIdentity, false}});
  Tensor W = Tensor::vector({1, 2, 3, 4});
  CHECK(jacobian_norm_penalty(single, W, lam, 4) == doctest::Approx(lam * 30 / 8));

  RngStream rng(3, "jac");
  auto deep = Model::linear_network(3, 4, 2);
  Tensor wd = deep.init_weights(rng);
  Tensor P = identity(3);
  for (std::size_t b = 0; b < deep.blocks().size(); ++b) {
    const auto& blk = deep.blocks()[b];
    P = matmul(P, slice(wd, 0, blk.offset, blk.size()).reshaped(blk.shape));
  }
  CHECK(jacobian_norm_penalty(deep, wd, lam, 7) == doctest::Approx(lam * dot(P, P) / 14).epsilon(1e-13));

  auto mlp = Model::mlp(2, {3}, 1, Activation::kRelu);
  CHECK_THROWS_AS(jacobian_norm_penalty(mlp, Tensor::zeros({mlp.num_weights()}), 1.0, 1), Error);
}

TEST_CASE("objective validation") {
  auto m = Model::mlp(2, {3}, 1, Activation::kRelu);
  RegularizedObjective obj;
  obj.regularizers = {{RegKind::kWeightDecay, 0, 0}, {RegKind::kInputDropout, 0, 0}};
  CHECK_THROWS_AS(obj.validate(m, 2), Error);
  obj.regularizers = {{RegKind::kWeightDecay, 0, 0}, {RegKind::kActivationDropout, 1, 1}};
  CHECK_NOTHROW(obj.validate(m, 2));
  obj.regularizers = {{RegKind::kJacobianNorm, 0, 0}};
  CHECK_THROWS_AS(obj.validate(m, 1), Error);
}

TEST_CASE("conv layer forward and gradient") {
  Model m({ConvLayer{1, 2, 2, 3, 3, Activation::kTanh}, DenseLayer{8, 1, Activation::kIdentity, true}});
  RngStream rng(4, "conv");
  Tensor w = m.init_weights(rng);
  Tensor x = testing::random_tensor(rng, {2, 9});
  ad::Computation f = [&](Tape& t, std::span<const Var> in) {
    return ad::sum_squares(m.forward(t, in[0], t.constant(x)));
  };
  CHECK(testing::gradient_check(f, {w}) <= 1e-5);
}

TEST_CASE("non-finite loss names the term") {
  auto m = Model::linear(1);
  auto obj = ridge_objective(1);
  Batch b{Tensor::matrix({{1}}), Tensor::vector({0})};
  try {
    training_loss(m, obj, Tensor::vector({1.0}), Tensor::vector({1e300}), b);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNonFinite);
    CHECK(std::string(e.what()).find("data") != std::string::npos);
  }
}
