// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stn/error.hpp"
#include "stn/experiment.hpp"
#include "support.hpp"

using namespace stn;
using namespace stn::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("stn_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream f(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(f, line)) ++n;
  return n;
}

const char* kRidgeYaml = R"(
name: ridge_test
seed: 3
output_dir: unused
data:
  generator: {kind: ridge, n: 40, dim: 4, noise: 0.5}
  split: 0.75
model: {arch: linear}
regularizers:
  - {kind: weight_decay, hyper: wd}
hyperparameters:
  - {name: wd, transform: exp, init: 1.0, search: [0.01, 10]}
sigma_init: 0.5
method: dstn
optimizers:
  inner: {kind: sgd, lr: 0.05}
  hyper: {kind: adam, lr: 0.01}
schedule: {T_train: 5, T_valid: 1, steps: 40, warmup_steps: 5, batch_size: 8}
)";

const char* kDropoutYaml = R"(
name: dropout_test
seed: 1
data:
  generator: {kind: nonlinear, n: 30, dim: 3, noise: 0.1}
model: {arch: mlp, hidden: [6], activation: tanh}
regularizers:
  - {kind: input_dropout, hyper: p_in}
  - {kind: activation_dropout, hyper: p_h, site: 1}
hyperparameters:
  - {name: p_in, transform: {kind: sigmoid_range, lo: 0, hi: 0.9}, init: 0.05, search: [0.0, 0.5]}
  - {name: p_h, transform: {kind: sigmoid_range, lo: 0, hi: 0.9}, init: 0.05, search: [0.0, 0.5]}
method: stn
schedule: {T_train: 4, steps: 24, batch_size: 6}
checkpoint_every: 8
)";

}  // namespace

TEST_CASE("csv parsing") {
  auto d = data::parse_csv("a,b,y\n1,2,3\n4,5,6\n");
  CHECK(d.x == Tensor::matrix({{1, 2}, {4, 5}}));
  CHECK(d.t == Tensor::vector({3, 6}));
  auto e = data::parse_csv("1, 2.5 ,-3e-1\n");
  CHECK(e.t[0] == doctest::Approx(-0.3));
  try {
    data::parse_csv("1,2,3\n4,x,6\n");
    FAIL("expected an error");
  } catch (const Error& err) {
    CHECK(std::string(err.what()).find("line 2, column 2") != std::string::npos);
  }
  CHECK_THROWS_AS(data::parse_csv("1,2\n3,4,5\n"), Error);
  CHECK_THROWS_AS(data::parse_csv("h1,h2\n"), Error);
}

TEST_CASE("split sizes, normalization and determinism") {
  RngStream g(0, "g");
  data::GeneratorSpec spec;
  spec.n = 10;
  spec.dim = 3;
  auto d = data::generate(spec, g);
  RngStream a(7, "split"), b(7, "split");
  auto s1 = data::split_dataset(d, 0.8, true, true, a);
  auto s2 = data::split_dataset(d, 0.8, true, true, b);
  CHECK(s1.train.size() == 8);
  CHECK(s1.valid.size() == 2);
  CHECK(s1.train_rows == s2.train_rows);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t r = 0; r < 8; ++r) m += s1.train.x.at(r, c);
    m /= 8;
    for (std::size_t r = 0; r < 8; ++r) v += std::pow(s1.train.x.at(r, c) - m, 2);
    CHECK(std::abs(m) < 1e-12);
    CHECK(std::abs(std::sqrt(v / 8) - 1.0) < 1e-12);
  }
  RngStream c(7, "split");
  CHECK_THROWS_AS(data::split_dataset(d, 0.99, false, false, c), Error);
  CHECK_THROWS_AS(data::split_dataset(d, 1.0, false, false, c), Error);
}

TEST_CASE("config round trip is a fixed point") {
  for (const char* text : {kRidgeYaml, kDropoutYaml}) {
    auto c1 = parse_config(text);
    const std::string s1 = serialize_config(c1);
    auto c2 = parse_config(s1);
    CHECK(c1 == c2);
    CHECK(serialize_config(c2) == s1);
  }
  auto c = parse_config(kRidgeYaml);
  c.epochs = 2.5;
  c.tau_sweep = {1e-2, 1e-3, 1e-4};
  c.hyperparameters[0].transform.clamp = std::pair{0.001, 100.0};
  c.bilevel.inner.momentum = 0.5;
  CHECK(parse_config(serialize_config(c)) == c);
}

TEST_CASE("config errors are reported together") {
  const char* bad = R"(
name: bad
data: {split: 1.5}
model: {arch: transformer}
regularizers: [{kind: weight_decay, hyper: nope}]
hyperparameters: [{name: wd, transform: exp, init: -1}]
bogus_key: 1
)";
  try {
    parse_config(bad);
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kConfig);
    const std::string msg = e.what();
    CHECK(msg.find("bogus_key") != std::string::npos);
  }
  const char* bad2 = R"(
data: {split: 1.5}
model: {arch: transformer}
regularizers: [{kind: weight_decay, hyper: nope}]
hyperparameters: [{name: wd, transform: exp, init: -1}]
)";
  try {
    parse_config(bad2);
    FAIL("expected a config error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    for (const char* part : {"data.split", "model.arch", "regularizers[0].hyper", "hyperparameters[0].init"})
      CHECK_MESSAGE(msg.find(part) != std::string::npos, part);
  }
  CHECK_THROWS_AS(parse_config("a: [unclosed"), Error);
}

TEST_CASE("epochs map onto steps") {
  auto c = parse_config(kRidgeYaml);  // 30 training rows, batch 8
  c.epochs = 2;
  c.warmup_epochs = 0.5;
  auto e = prepare(c);
  CHECK(e.problem.train.size() == 30);
  CHECK(e.schedule.steps == 8);
  CHECK(e.schedule.warmup_steps == 2);
}

TEST_CASE("train writes deterministic metrics and a consistent summary") {
  auto c = parse_config(kRidgeYaml);
  auto d1 = scratch("det1"), d2 = scratch("det2");
  auto s1 = run_experiment(c, {d1.string(), false});
  run_experiment(c, {d2.string(), false});
  CHECK(slurp(d1 / "metrics.jsonl") == slurp(d2 / "metrics.jsonl"));
  // warm-up + inner steps + one outer step per T_train block
  CHECK(count_lines(d1 / "metrics.jsonl") == 5 + 40 + 8);
  CHECK(s1["records"] == 53);
  CHECK(s1["status"] == "completed");
  CHECK(fs::exists(d1 / "problem.json"));
  CHECK(fs::exists(d1 / "checkpoint.json"));
  CHECK(load_json((d1 / "checkpoint.json").string())["format_version"] == kFormatVersion);
  const auto recs = read_metrics(d1.string());
  for (std::size_t i = 1; i < recs.size(); ++i) CHECK(recs[i]["step"] > recs[i - 1]["step"]);
  CHECK(s1["best_val_loss"].get<double>() <= recs.back()["val_loss"].get<double>());
}

TEST_CASE("resume reproduces the uninterrupted run") {
  for (const char* text : {kRidgeYaml, kDropoutYaml}) {
    auto full = parse_config(text);
    auto half = full;
    half.bilevel.steps = 12;
    auto a = scratch("resume_a"), b = scratch("resume_b");
    run_experiment(full, {a.string(), false});
    run_experiment(half, {b.string(), false});
    run_experiment(full, {b.string(), true});
    CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
    CHECK(slurp(a / "checkpoint.json") == slurp(b / "checkpoint.json"));
  }
}

TEST_CASE("non-finite run exits with an aborted summary") {
  auto c = parse_config(kRidgeYaml);
  c.bilevel.inner.lr = 1e8;
  auto d = scratch("abort");
  CHECK_THROWS_AS(run_experiment(c, {d.string(), false}), bilevel::TrainingAborted);
  auto s = load_json((d / "summary.json").string());
  CHECK(s["status"] == "aborted");
  CHECK(s.contains("last_record"));
}

TEST_CASE("oracle queries") {
  Json g = Json::parse(R"({"kind": "ridge", "X": [[1]], "t": [1], "transform": "identity", "lambda": 0.5})");
  auto br = oracle_query(g, "best-response");
  CHECK(br["w"][0].get<double>() == doctest::Approx(1.0 / 1.5).epsilon(1e-14));
  auto jac = oracle_query(g, "jacobian");
  CHECK(jac["jacobian"][0].get<double>() == doctest::Approx(-1.0 / (1.5 * 1.5)));
  g["sigma"] = 1.0;
  auto bias = oracle_query(g, "biased-fixed-point");
  // w0 = (1 - theta sigma^2) / (1 + lambda) with theta = -1/(1+lambda)^2
  CHECK(bias["w_biased"][0].get<double>() == doctest::Approx((1.0 + 1.0 / 2.25) / 1.5));
  CHECK_THROWS_AS(oracle_query(g, "nonsense"), Error);
  Json q = Json::parse(R"({"kind": "quadratic", "A": [[2, 0], [0, 4]], "B": [[1], [2]], "lambda": [1]})");
  auto qj = oracle_query(q, "jacobian");
  CHECK(qj["jacobian"][0][0].get<double>() == doctest::Approx(-0.5));
  CHECK(qj["jacobian"][1][0].get<double>() == doctest::Approx(-0.5));
  try {
    oracle_query(q, "bilevel");
    FAIL("expected inapplicable");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInapplicable);
  }
}

TEST_CASE("compare reports zero distance when started at the optimum") {
  auto c = parse_config(kRidgeYaml);
  auto e = prepare(c);
  auto p = *ridge_oracle(e);
  auto sol = oracles::bilevel_solve(p, -10, 10);
  c.hyperparameters[0].init = std::exp(sol.lambda_raw);
  c.bilevel.update_hyper = false;
  c.bilevel.freeze_sigma = true;
  auto d = scratch("compare");
  run_experiment(c, {d.string(), false});
  auto report = compare_with_oracle(d.string(), load_json((d / "problem.json").string()));
  CHECK(report["lambda_error"].get<double>() < 1e-6);
  for (const auto& pt : report["distance"]) CHECK(pt[1].get<double>() < 1e-6);
  CHECK(Json::parse(report.dump()) == report);

  auto cd = parse_config(kDropoutYaml);
  auto dd = scratch("compare_mlp");
  run_experiment(cd, {dd.string(), false});
  try {
    compare_with_oracle(dd.string(), load_json((d / "problem.json").string()));
    FAIL("expected inapplicable");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::kInapplicable);
    CHECK(std::string(err.what()).find("mlp") != std::string::npos);
  }
}

TEST_CASE("analysis and plot data from a run") {
  auto c = parse_config(kDropoutYaml);
  auto d = scratch("analyze");
  run_experiment(c, {d.string(), false});
  auto cond = analyze_run(d.string(), "conditioning");
  CHECK(cond["kappa_lambda_centered"].get<double>() <= cond["kappa_lambda_uncentered"].get<double>());
  CHECK(cond["kappa_gphi_centered"].get<double>() <= cond["kappa_gphi_uncentered"].get<double>());
  auto al = analyze_run(d.string(), "alignment");
  CHECK(al["series"].size() > 0);
  auto sp = analyze_run(d.string(), "spike");
  CHECK(sp.contains("spike_term_uncentered"));
  CHECK_THROWS_AS(analyze_run(d.string(), "nope"), Error);

  const auto n = read_metrics(d.string()).size();
  auto paths = write_plotdata(d.string(), {"val_loss", "lambda.p_in"}, (d / "plot.txt").string());
  REQUIRE(paths.size() == 2);
  for (const auto& p : paths) CHECK(count_lines(p) == n);
  CHECK_THROWS_AS(write_plotdata(d.string(), {"nope"}, (d / "x.txt").string()), Error);
}

TEST_CASE("search over declared bounds") {
  auto c = parse_config(kRidgeYaml);
  auto r = search(c, bilevel::SearchKind::kGrid, 4);
  CHECK(r["trials"].size() == 4);
  CHECK(r["best"].contains("wd"));
}

TEST_CASE("entropy sweep writes one run per weight") {
  auto c = parse_config(kRidgeYaml);
  c.tau_sweep = {1e-2, 1e-3, 1e-4};
  c.bilevel.steps = 10;
  auto d = scratch("sweep");
  auto s = run_experiment(c, {d.string(), false});
  CHECK(s["runs"].size() == 3);
  CHECK(fs::exists(d / "sweep.json"));
  CHECK(fs::exists(d / "tau_0.001" / "metrics.jsonl"));
}
