// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "stn/stn.h"

namespace fs = std::filesystem;

namespace {

const char* kYaml = R"(
name: capi
seed: 5
output_dir: unused
data:
  generator: {kind: ridge, n: 40, dim: 3, noise: 0.5}
  split: 0.5
model: {arch: linear}
regularizers:
  - {kind: weight_decay, hyper: wd}
hyperparameters:
  - {name: wd, transform: exp, init: 1.0, search: [0.01, 10]}
sigma_init: 0.5
optimizers:
  inner: {kind: sgd, lr: 0.05}
  hyper: {kind: adam, lr: 0.01}
schedule: {T_train: 5, T_valid: 1, steps: 30, warmup_steps: 5}
)";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("stn_capi_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string take(char* s) {
  std::string out = s ? s : "";
  stn_string_free(s);
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(STN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string cli_output(const std::string& args) {
  const std::string cmd = std::string(STN_CLI_PATH) + " " + args + " 2>/dev/null";
  std::string out;
  if (FILE* f = popen(cmd.c_str(), "r")) {
    char buf[4096];
    std::size_t got;
    while ((got = std::fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, got);
    pclose(f);
  }
  return out;
}

}  // namespace

TEST_CASE("status names and errors") {
  CHECK(std::string(stn_version()).size() > 0);
  CHECK(std::string(stn_status_name(STN_ERR_CONFIG)) == "config");
  stn_config* c = nullptr;
  CHECK(stn_config_parse(nullptr, &c) == STN_ERR_INVALID_ARGUMENT);
  CHECK(std::string(stn_last_error()).find("NULL") != std::string::npos);
  CHECK(stn_config_parse("model: {arch: nope}\n", &c) == STN_ERR_CONFIG);
  CHECK(c == nullptr);
  CHECK(std::string(stn_last_error()).find("model.arch") != std::string::npos);
  CHECK(stn_config_load("/nonexistent/x.yaml", &c) != STN_OK);
  stn_config_free(nullptr);
  stn_ridge_free(nullptr);
}

TEST_CASE("config round trip through the handle") {
  stn_config* c = nullptr;
  REQUIRE(stn_config_parse(kYaml, &c) == STN_OK);
  CHECK(stn_config_set_seed(c, 9) == STN_OK);
  CHECK(stn_config_set_output_dir(c, "") == STN_ERR_INVALID_ARGUMENT);
  char* text = nullptr;
  REQUIRE(stn_config_serialize(c, &text) == STN_OK);
  std::string first = take(text);
  CHECK(first.find("seed: 9") != std::string::npos);
  stn_config* d = nullptr;
  REQUIRE(stn_config_parse(first.c_str(), &d) == STN_OK);
  REQUIRE(stn_config_serialize(d, &text) == STN_OK);
  CHECK(take(text) == first);
  stn_config_free(c);
  stn_config_free(d);
}

TEST_CASE("ridge handle matches the one-dimensional closed form") {
  const double X[] = {1.0}, t[] = {1.0};
  stn_ridge* r = nullptr;
  REQUIRE(stn_ridge_create(X, t, 1, 1, nullptr, nullptr, 0, 1, 0, &r) == STN_OK);
  for (double lam : {0.0, 0.5, 1.0, 3.0}) {
    double w = 0, j = 0;
    REQUIRE(stn_ridge_best_response(r, lam, &w) == STN_OK);
    REQUIRE(stn_ridge_jacobian(r, lam, &j) == STN_OK);
    CHECK(w == doctest::Approx(1.0 / (1.0 + lam)).epsilon(1e-14));
    CHECK(j == doctest::Approx(-1.0 / ((1.0 + lam) * (1.0 + lam))).epsilon(1e-12));
  }
  double lam = 0, v = 0;
  // validation equal to training: the minimum sits at the lower end
  CHECK(stn_ridge_bilevel_solve(r, 0.0, 5.0, 0, &lam, &v) == STN_ERR_INVALID_ARGUMENT);
  REQUIRE(stn_ridge_bilevel_solve(r, 0.0, 5.0, 1, &lam, &v) == STN_OK);
  CHECK(lam == doctest::Approx(0.0));
  CHECK(stn_ridge_create(X, t, 1, 1, nullptr, nullptr, 0, 7, 0, &r) == STN_ERR_INVALID_ARGUMENT);
  stn_ridge_free(r);
}

TEST_CASE("train, compare, analyze and plotdata through the C API") {
  auto dir = scratch("train");
  stn_config* c = nullptr;
  REQUIRE(stn_config_parse(kYaml, &c) == STN_OK);
  char* summary = nullptr;
  REQUIRE(stn_train(c, (dir / "a").c_str(), 0, &summary) == STN_OK);
  CHECK(take(summary).find("\"status\": \"completed\"") != std::string::npos);
  REQUIRE(stn_train(c, (dir / "b").c_str(), 0, nullptr) == STN_OK);
  CHECK(slurp(dir / "a" / "metrics.jsonl") == slurp(dir / "b" / "metrics.jsonl"));

  char* out = nullptr;
  REQUIRE(stn_compare((dir / "a").c_str(), (dir / "a" / "problem.json").c_str(), &out) == STN_OK);
  CHECK(take(out).find("lambda_error") != std::string::npos);
  REQUIRE(stn_analyze((dir / "a").c_str(), "conditioning", &out) == STN_OK);
  CHECK(take(out).find("kappa") != std::string::npos);
  CHECK(stn_analyze((dir / "a").c_str(), "bogus", &out) == STN_ERR_INVALID_ARGUMENT);
  REQUIRE(stn_plotdata((dir / "a").c_str(), "val_loss,lambda.wd", (dir / "p.dat").c_str(), &out) == STN_OK);
  CHECK(take(out).find("p.val_loss.dat") != std::string::npos);
  CHECK(fs::exists(dir / "p.lambda.wd.dat"));
  REQUIRE(stn_search(c, "grid", 3, &out) == STN_OK);
  CHECK(take(out).find("best") != std::string::npos);
  CHECK(stn_search(c, "anneal", 3, &out) != STN_OK);
  stn_config_free(c);
}

TEST_CASE("command line exit codes and determinism") {
  auto dir = scratch("cli");
  {
    std::ofstream(dir / "c.yaml") << kYaml;
    std::ofstream(dir / "bad.yaml") << "model: {arch: nope}\n";
    std::ofstream(dir / "p.json") << R"({"kind": "ridge", "transform": "identity", "X": [[1]], "t": [1], "lambda": 1})";
    std::ofstream(dir / "q.json") << R"({"kind": "quadratic", "A": [[2]], "B": [[1]]})";
  }
  const std::string cfg = (dir / "c.yaml").string();
  CHECK(run_cli("") == 1);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("train --config " + (dir / "missing.yaml").string()) == 1);
  CHECK(run_cli("train --config " + (dir / "bad.yaml").string()) == 2);
  CHECK(run_cli("train --config " + cfg + " --out " + (dir / "r1").string()) == 0);
  CHECK(run_cli("train --config " + cfg + " --out " + (dir / "r2").string()) == 0);
  CHECK(slurp(dir / "r1" / "metrics.jsonl") == slurp(dir / "r2" / "metrics.jsonl"));
  CHECK(run_cli("train --config " + cfg + " --seed 6 --steps 10 --out " + (dir / "r3").string()) == 0);
  CHECK(slurp(dir / "r1" / "metrics.jsonl") != slurp(dir / "r3" / "metrics.jsonl"));
  CHECK(run_cli("oracle --problem " + (dir / "p.json").string() + " --what best-response") == 0);
  CHECK(run_cli("oracle --problem " + (dir / "p.json").string() + " --what nonsense") == 1);
  const auto printed = cli_output("oracle --problem " + (dir / "p.json").string() + " --what best-response");
  CHECK(printed.find("\"w\"") != std::string::npos);
  CHECK((printed.find("0.5") != std::string::npos || printed.find("0.4999999999") != std::string::npos));
  CHECK(cli_output("train --config " + cfg + " --steps 5 --out " + (dir / "r4").string()).find("\"status\"") !=
        std::string::npos);
  CHECK(run_cli("compare --run " + (dir / "r1").string() + " --oracle " + (dir / "p.json").string()) == 2);
  CHECK(run_cli("compare --run " + (dir / "r1").string() + " --oracle " + (dir / "r1" / "problem.json").string()) == 0);
  CHECK(run_cli("oracle --problem " + (dir / "q.json").string() + " --what bilevel") == 3);
  CHECK(run_cli("analyze --run " + (dir / "r1").string() + " --what spike") == 0);
  CHECK(run_cli("search --config " + cfg + " --kind grid --budget 2") == 0);
  CHECK(run_cli("plotdata --run " + (dir / "r1").string() + " --series train_loss --out " +
                (dir / "t.dat").string()) == 0);
}
