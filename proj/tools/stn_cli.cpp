// SPDX-License-Identifier: Apache-2.0
// Command-line front end; talks to the library only through stn.h.
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "stn/stn.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

int exit_code(stn_status s) {
  switch (s) {
    case STN_OK: return kExitOk;
    case STN_ERR_CONFIG: return kExitConfig;
    case STN_ERR_INVALID_ARGUMENT: return kExitUsage;
    default: return kExitRuntime;
  }
}

int report(stn_status s) {
  if (s != STN_OK) std::cerr << "error (" << stn_status_name(s) << "): " << stn_last_error() << "\n";
  return exit_code(s);
}

// Runs a call that yields an owned JSON string, prints it and frees it.
template <typename F>
int emit(F&& call) {
  char* json = nullptr;
  const stn_status s = call(&json);
  if (s == STN_OK && json) std::cout << json << "\n";
  stn_string_free(json);
  return report(s);
}

struct ConfigHandle {
  stn_config* p = nullptr;
  ~ConfigHandle() { stn_config_free(p); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-tuning networks: training, oracles and diagnostics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(stn_version()));

  std::string config_path, out_dir, problem_path, what, run_dir, oracle_path, kind = "random", series, out_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::size_t budget = 10;
  bool resume = false;

  auto* train = app.add_subcommand("train", "run an experiment from a YAML config");
  train->add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "override the seed");
  train->add_option("--out", out_dir, "override the output directory");
  train->add_option("--steps", steps, "override the post-warm-up step count");
  train->add_flag("--resume", resume, "continue from the checkpoint in the output directory");

  auto* oracle = app.add_subcommand("oracle", "closed-form answers for a problem file");
  oracle->add_option("--problem", problem_path, "problem JSON")->required()->check(CLI::ExistingFile);
  oracle->add_option("--what", what, "best-response | jacobian | bilevel | biased-fixed-point")->required();

  auto* analyze = app.add_subcommand("analyze", "diagnostics of a finished run");
  analyze->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--what", what, "conditioning | alignment | spike")->required();

  auto* compare = app.add_subcommand("compare", "compare a run with the oracle");
  compare->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--oracle", oracle_path, "problem JSON")->required()->check(CLI::ExistingFile);

  auto* search = app.add_subcommand("search", "grid or random search baseline");
  search->add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);
  search->add_option("--kind", kind, "grid | random")->check(CLI::IsMember({"grid", "random"}));
  search->add_option("--budget", budget, "number of trials")->check(CLI::PositiveNumber);

  auto* plot = app.add_subcommand("plotdata", "two-column series for plotting");
  plot->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  plot->add_option("--series", series, "comma-separated metric names")->required();
  plot->add_option("--out", out_path, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  if (*train || *search) {
    ConfigHandle cfg;
    if (auto s = stn_config_load(config_path.c_str(), &cfg.p); s != STN_OK) return report(s);
    if (seed)
      if (auto s = stn_config_set_seed(cfg.p, *seed); s != STN_OK) return report(s);
    if (steps)
      if (auto s = stn_config_set_steps(cfg.p, *steps); s != STN_OK) return report(s);
    if (*search) return emit([&](char** out) { return stn_search(cfg.p, kind.c_str(), budget, out); });
    const char* dir = out_dir.empty() ? nullptr : out_dir.c_str();
    return emit([&](char** out) { return stn_train(cfg.p, dir, resume ? 1 : 0, out); });
  }
  if (*oracle) return emit([&](char** out) { return stn_oracle(problem_path.c_str(), what.c_str(), out); });
  if (*analyze) return emit([&](char** out) { return stn_analyze(run_dir.c_str(), what.c_str(), out); });
  if (*compare) return emit([&](char** out) { return stn_compare(run_dir.c_str(), oracle_path.c_str(), out); });
  return emit([&](char** out) { return stn_plotdata(run_dir.c_str(), series.c_str(), out_path.c_str(), out); });
}
