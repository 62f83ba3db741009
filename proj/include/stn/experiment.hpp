// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "stn/bilevel.hpp"
#include "stn/data.hpp"
#include "stn/hypernet.hpp"
#include "stn/oracles.hpp"

namespace stn::harness {

using Json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;

struct DataConfig {
  std::string path;  // CSV; empty selects the generator
  data::GeneratorSpec generator;
  double split = 0.8;
  bool normalize = true;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct ConvConfig {
  std::size_t channels = 1;
  std::size_t filters = 4;
  std::size_t kernel = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  friend bool operator==(const ConvConfig&, const ConvConfig&) = default;
};

/// arch: linear | mlp | linear_network | cnn (one conv layer, dense head)
struct ModelConfig {
  std::string arch = "linear";
  std::vector<std::size_t> hidden;
  std::string activation = "tanh";
  std::size_t depth = 2;
  std::size_t outputs = 1;
  bool bias = false;
  std::string loss = "mse";
  ConvConfig conv;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct RegularizerConfig {
  std::string kind;   // weight_decay | input_dropout | activation_dropout | jacobian_norm
  std::string hyper;  // hyperparameter name
  std::size_t site = 0;
  friend bool operator==(const RegularizerConfig&, const RegularizerConfig&) = default;
};

struct HyperparamConfig {
  std::string name;
  hyper::TransformSpec transform;
  double init = 0.0;  // domain units
  std::optional<double> search_lo;
  std::optional<double> search_hi;
  friend bool operator==(const HyperparamConfig&, const HyperparamConfig&) = default;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/experiment";
  DataConfig data;
  ModelConfig model;
  std::vector<RegularizerConfig> regularizers;
  models::PenaltyScaling penalty_scaling = models::PenaltyScaling::kPerN;
  std::vector<HyperparamConfig> hyperparameters;
  double sigma_init = 1.0;
  bilevel::BilevelConfig bilevel;  // seed mirrors `seed`
  std::optional<double> epochs;         // overrides bilevel.steps
  std::optional<double> warmup_epochs;  // overrides bilevel.warmup_steps
  std::size_t checkpoint_every = 0;     // inner steps; 0 keeps only the final one
  bool log_wall_time = false;
  std::vector<double> tau_sweep;        // one sub-run per entropy weight

  /// Throws kConfig listing every problem found.
  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& config);

/// Config resolved against its data: the problem, initial hyperparameters
/// and a schedule expressed in steps.
struct Experiment {
  ExperimentConfig config;
  data::Split split;
  bilevel::Problem problem;
  bilevel::BilevelConfig schedule;
  hyper::HyperparamState initial;
};

Experiment prepare(const ExperimentConfig& config);

/// Closed-form counterpart when the run is ridge regression with a single
/// weight-decay hyperparameter.
std::optional<oracles::RidgeProblem> ridge_oracle(const Experiment& e);
/// Human-readable reason when `ridge_oracle` is empty.
std::string problem_class(const Experiment& e);

Json record_to_json(const bilevel::MetricsRecord& r, const std::vector<std::string>& names);

Json checkpoint_to_json(const bilevel::TrainState& s, const bilevel::BilevelConfig& schedule);
/// Restores into a state built by `bilevel::init_state` for the same config.
void restore_checkpoint(bilevel::TrainState& s, const Json& j);

struct RunOptions {
  std::optional<std::string> output_dir;
  bool resume = false;
};

/// Writes config.yaml, metrics.jsonl, summary.json, checkpoint.json and,
/// for ridge problems, problem.json. Returns the summary. A non-finite loss
/// rethrows TrainingAborted after writing an "aborted" summary.
Json run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Oracle problem files (JSON): {"kind": "ridge" | "quadratic", ...}.
Json load_json(const std::string& path);
void save_json(const std::string& path, const Json& j);
oracles::RidgeProblem ridge_from_json(const Json& j);
Json ridge_to_json(const oracles::RidgeProblem& p);
oracles::QuadraticProblem quadratic_from_json(const Json& j);
Json quadratic_to_json(const oracles::QuadraticProblem& p);

/// what: best-response | jacobian | bilevel | biased-fixed-point
Json oracle_query(const Json& problem, const std::string& what);

Json compare_with_oracle(const std::string& run_dir, const Json& oracle);

/// what: conditioning | alignment | spike
Json analyze_run(const std::string& run_dir, const std::string& what);

Json search(const ExperimentConfig& config, bilevel::SearchKind kind, std::size_t budget);

/// Writes one two-column (step value) file per series; returns the paths.
/// A single series goes to `out`; several go to `<stem>.<series><ext>`.
std::vector<std::string> write_plotdata(const std::string& run_dir, const std::vector<std::string>& series,
                                        const std::string& out);

std::vector<Json> read_metrics(const std::string& run_dir);

}  // namespace stn::harness
