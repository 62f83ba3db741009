// SPDX-License-Identifier: Apache-2.0
#include "stn/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stn/analysis.hpp"
#include "stn/error.hpp"

namespace stn::harness {

namespace fs = std::filesystem;
using bilevel::MetricsRecord;
using bilevel::TrainState;

namespace {

Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

double num_of(const Json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

Json tensor_json(const Tensor& t) { return Json{{"shape", t.shape()}, {"data", t.values()}}; }

Tensor tensor_of(const Json& j, const std::string& what) {
  try {
    return Tensor::from_external(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
  } catch (const Json::exception& e) {
    fail(ErrorCode::kIo, "malformed tensor '" + what + "': " + e.what());
  }
}

Tensor matrix_of(const Json& j, const std::string& what) {
  try {
    if (j.is_object()) return tensor_of(j, what);
    const auto rows = j.get<std::vector<std::vector<double>>>();
    require(!rows.empty(), ErrorCode::kConfig, what + " is empty");
    std::vector<double> flat;
    for (const auto& r : rows) {
      require(r.size() == rows[0].size(), ErrorCode::kConfig, what + " has ragged rows");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor::from_external(Shape{rows.size(), rows[0].size()}, flat);
  } catch (const Json::exception& e) {
    fail(ErrorCode::kConfig, what + ": expected a list of rows (" + e.what() + ")");
  }
}

Tensor vector_of(const Json& j, const std::string& what) {
  try {
    auto v = j.get<std::vector<double>>();
    const std::size_t n = v.size();
    return Tensor::from_external(Shape{n}, std::move(v));
  } catch (const Json::exception& e) {
    fail(ErrorCode::kConfig, what + ": expected a list of numbers (" + e.what() + ")");
  }
}

Json rows_json(const Tensor& m) {
  Json out = Json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (std::size_t c = 0; c < m.cols(); ++c) row.push_back(m.at(r, c));
    out.push_back(row);
  }
  return out;
}

models::Activation activation_of(const std::string& s) {
  if (s == "identity") return models::Activation::kIdentity;
  if (s == "relu") return models::Activation::kRelu;
  return models::Activation::kTanh;
}

models::Model build_model(const ModelConfig& m, std::size_t input_dim) {
  const auto act = activation_of(m.activation);
  if (m.arch == "linear") {
    if (m.outputs == 1) return models::Model::linear(input_dim, m.bias);
    return models::Model({models::DenseLayer{input_dim, m.outputs, models::Activation::kIdentity, m.bias}});
  }
  if (m.arch == "mlp") return models::Model::mlp(input_dim, m.hidden, m.outputs, act);
  if (m.arch == "linear_network") return models::Model::linear_network(input_dim, m.depth, m.outputs);
  const auto& c = m.conv;
  require(c.channels * c.height * c.width == input_dim, ErrorCode::kConfig,
          "model.conv: channels*height*width = " + std::to_string(c.channels * c.height * c.width) +
              " does not match the " + std::to_string(input_dim) + " input features");
  models::ConvLayer conv{c.channels, c.filters, c.kernel, c.height, c.width, act};
  const std::size_t flat = c.filters * conv.out_height() * conv.out_width();
  return models::Model({conv, models::DenseLayer{flat, m.outputs, models::Activation::kIdentity, true}});
}

models::RegKind reg_kind_of(const std::string& s) {
  if (s == "weight_decay") return models::RegKind::kWeightDecay;
  if (s == "input_dropout") return models::RegKind::kInputDropout;
  if (s == "activation_dropout") return models::RegKind::kActivationDropout;
  return models::RegKind::kJacobianNorm;
}

std::vector<std::string> names_of(const ExperimentConfig& c) {
  std::vector<std::string> out;
  for (const auto& h : c.hyperparameters) out.push_back(h.name);
  return out;
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), ErrorCode::kIo, "cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorCode::kIo, "cannot write '" + path + "'");
  f << text;
  require(f.good(), ErrorCode::kIo, "write failed for '" + path + "'");
}

/// Keeps the first `lines` lines of a file (drops records written after
/// the checkpoint being resumed).
void truncate_lines(const std::string& path, std::size_t lines) {
  std::string text;
  if (fs::exists(path)) text = read_text(path);
  std::size_t pos = 0, kept = 0;
  while (kept < lines) {
    const auto nl = text.find('\n', pos);
    require(nl != std::string::npos, ErrorCode::kIo,
            "metrics file '" + path + "' has fewer records than the checkpoint (" + std::to_string(lines) + ")");
    pos = nl + 1;
    ++kept;
  }
  write_text(path, text.substr(0, pos));
}

Json slot_json(const optim::Optimizer::Slot& s) {
  Json j{{"t", s.t}, {"initialized", s.initialized}};
  if (s.initialized) {
    j["m"] = tensor_json(s.m);
    j["v"] = tensor_json(s.v);
  }
  return j;
}

void restore_optimizer(optim::Optimizer& opt, const Json& j, const std::string& what) {
  auto& slots = opt.slots();
  slots.clear();
  for (const auto& sj : j) {
    optim::Optimizer::Slot s;
    s.t = sj.at("t").get<std::size_t>();
    s.initialized = sj.at("initialized").get<bool>();
    if (s.initialized) {
      s.m = tensor_of(sj.at("m"), what + ".m");
      s.v = tensor_of(sj.at("v"), what + ".v");
    }
    slots.push_back(std::move(s));
  }
}

Json named(const std::vector<std::string>& names, const std::vector<double>& values) {
  Json o = Json::object();
  for (std::size_t i = 0; i < names.size() && i < values.size(); ++i) o[names[i]] = num(values[i]);
  return o;
}

struct LoadedRun {
  Experiment experiment;
  TrainState state;
};

LoadedRun load_run(const std::string& run_dir) {
  const fs::path dir(run_dir);
  require(fs::is_directory(dir), ErrorCode::kIo, "run directory '" + run_dir + "' does not exist");
  Experiment e = prepare(load_config((dir / "config.yaml").string()));
  TrainState s = bilevel::init_state(e.problem, e.schedule, e.initial);
  restore_checkpoint(s, load_json((dir / "checkpoint.json").string()));
  return {std::move(e), std::move(s)};
}

Json best_by_step(const std::vector<Json>& records, double& best, std::size_t& best_step) {
  Json series = Json::array();
  best = std::nan("");
  best_step = 0;
  for (const auto& r : records) {
    if (!r.contains("val_loss") || r["val_loss"].is_null()) continue;
    const double v = r["val_loss"].get<double>();
    if (std::isnan(best) || v < best) {
      best = v;
      best_step = r["step"].get<std::size_t>();
    }
    series.push_back(Json::array({r["step"], best}));
  }
  return series;
}

Json write_summary(const fs::path& dir, const Experiment& e, const TrainState& s, const std::string& status,
                   double seconds, const std::optional<std::string>& error,
                   const std::optional<MetricsRecord>& last) {
  const auto names = names_of(e.config);
  const auto records = read_metrics(dir.string());
  Json j;
  j["format_version"] = kFormatVersion;
  j["name"] = e.config.name;
  j["method"] = bilevel::to_string(e.schedule.method);
  j["hypernet"] = hyper::to_string(s.net.kind());
  j["status"] = status;
  j["seed"] = e.config.seed;
  j["records"] = s.records;
  j["inner_steps"] = s.inner_steps;
  j["hyper_steps"] = s.hyper_steps;
  j["sigma_steps"] = s.sigma_steps;
  j["n_train"] = e.problem.train.size();
  j["n_valid"] = e.problem.valid.size();
  Json fin;
  fin["lambda"] = named(names, s.hp.transformed().values());
  fin["lambda_raw"] = named(names, s.hp.lambda.values());
  fin["sigma"] = named(names, s.hp.sigma().values());
  double val = std::nan(""), train = std::nan("");
  if (status == "completed") {
    val = bilevel::center_validation_loss(s, e.problem);
    train = models::training_loss(e.problem.model, e.problem.objective, s.hp.transformed(), s.center_weights(),
                                  e.problem.train);
  }
  fin["val_loss"] = num(val);
  fin["train_loss"] = num(train);
  j["final"] = fin;
  double best = 0;
  std::size_t best_step = 0;
  Json series = best_by_step(records, best, best_step);
  if (std::isfinite(val) && (std::isnan(best) || val < best)) {
    best = val;
    best_step = s.records;
  }
  j["best_val_loss"] = num(best);
  j["best_val_step"] = best_step;
  j["best_val_loss_by_step"] = series;
  j["wall_time_seconds"] = seconds;
  if (error) j["error"] = *error;
  if (last) j["last_record"] = record_to_json(*last, names);
  save_json((dir / "summary.json").string(), j);
  return j;
}

Json run_single(const ExperimentConfig& config, const fs::path& dir, bool resume) {
  const auto start = std::chrono::steady_clock::now();
  Experiment e = prepare(config);
  fs::create_directories(dir);
  const auto names = names_of(config);
  const std::string metrics = (dir / "metrics.jsonl").string();
  const std::string ckpt = (dir / "checkpoint.json").string();

  TrainState s = bilevel::init_state(e.problem, e.schedule, e.initial);
  if (resume) {
    require(fs::exists(ckpt), ErrorCode::kIo, "no checkpoint to resume in '" + dir.string() + "'");
    restore_checkpoint(s, load_json(ckpt));
    truncate_lines(metrics, s.records);
  } else {
    write_text(metrics, "");
  }
  write_text((dir / "config.yaml").string(), serialize_config(config));
  if (auto ridge = ridge_oracle(e)) {
    Json pj = ridge_to_json(*ridge);
    pj["lambda"] = e.initial.transformed()[0];
    save_json((dir / "problem.json").string(), pj);
  }

  std::ofstream out(metrics, std::ios::binary | std::ios::app);
  require(out.good(), ErrorCode::kIo, "cannot append to '" + metrics + "'");
  auto sink = [&](const MetricsRecord& r) {
    Json line = record_to_json(r, names);
    if (config.log_wall_time)
      line["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out << line.dump() << '\n';
    out.flush();
    if (config.checkpoint_every > 0 && r.phase != "valid" && s.inner_steps % config.checkpoint_every == 0)
      save_json(ckpt, checkpoint_to_json(s, e.schedule));
  };
  try {
    bilevel::run(s, e.problem, e.schedule, sink);
  } catch (const bilevel::TrainingAborted& a) {
    out.close();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_summary(dir, e, s, "aborted", secs, std::string(a.what()), a.last());
    throw;
  }
  out.close();
  save_json(ckpt, checkpoint_to_json(s, e.schedule));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return write_summary(dir, e, s, "completed", secs, std::nullopt, std::nullopt);
}

std::string tau_label(double t) {
  std::ostringstream os;
  os << t;
  return "tau_" + os.str();
}

/// Network Jacobian dy/dw in evaluation mode, one row per output entry.
Tensor output_jacobian(const bilevel::Problem& problem, const Tensor& lam_t, const Tensor& w, const Tensor& x) {
  const auto& model = problem.model;
  const std::size_t n = x.rows(), k = model.output_dim();
  Tensor J(Shape{n * k, w.numel()});
  for (std::size_t i = 0; i < n * k; ++i) {
    ad::Tape tape;
    auto wv = tape.leaf(w);
    auto plan = models::evaluation_plan(model, problem.objective, tape.constant(lam_t));
    auto y = model.forward(tape, wv, tape.constant(x), plan);
    Tensor sel = Tensor::zeros({n, k});
    sel[i] = 1.0;
    auto g = tape.backward(ad::sum(ad::mul(y, tape.constant(sel)))).of(wv);
    for (std::size_t c = 0; c < w.numel(); ++c) J.at(i, c) = g[c];
  }
  return J;
}

Tensor output_hessian(const models::Model& model, models::LossKind loss, const Tensor& w, const Tensor& x) {
  const std::size_t n = x.rows(), k = model.output_dim();
  Tensor H = Tensor::zeros({n * k, n * k});
  if (loss == models::LossKind::kMse) {
    for (std::size_t i = 0; i < n * k; ++i) H.at(i, i) = 1.0 / static_cast<double>(n);
    return H;
  }
  Tensor y = models::forward(model, x, w);
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -INFINITY, z = 0;
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, y.at(r, c));
    std::vector<double> p(k);
    for (std::size_t c = 0; c < k; ++c) z += p[c] = std::exp(y.at(r, c) - mx);
    for (auto& v : p) v /= z;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b)
        H.at(r * k + a, r * k + b) = ((a == b ? p[a] : 0.0) - p[a] * p[b]) / static_cast<double>(n);
  }
  return H;
}

Json condition_or_null(const Tensor& m) {
  try {
    return analysis::spd_condition(m);
  } catch (const Error&) {
    return nullptr;
  }
}

}  // namespace

Experiment prepare(const ExperimentConfig& config) {
  config.validate();
  Experiment e{config, {}, {models::Model::linear(1), {}, {}, {}}, config.bilevel, {}};
  data::Dataset full;
  if (!config.data.path.empty()) {
    full = data::read_csv(config.data.path);
  } else {
    RngStream gen(config.seed, "data");
    full = data::generate(config.data.generator, gen);
  }
  const bool classification = config.model.loss == "cross_entropy";
  RngStream split_rng(config.seed, "split");
  e.split = data::split_dataset(full, config.data.split, config.data.normalize, !classification, split_rng);

  e.problem.model = build_model(config.model, full.x.cols());
  e.problem.train = e.split.train;
  e.problem.valid = e.split.valid;
  auto& obj = e.problem.objective;
  obj.loss = classification ? models::LossKind::kCrossEntropy : models::LossKind::kMse;
  obj.scaling = config.penalty_scaling;
  obj.n_train = e.split.train.size();
  const auto names = names_of(config);
  for (const auto& r : config.regularizers) {
    const auto idx = static_cast<std::size_t>(std::find(names.begin(), names.end(), r.hyper) - names.begin());
    obj.regularizers.push_back({reg_kind_of(r.kind), idx, r.site});
  }
  try {
    obj.validate(e.problem.model, names.size());
  } catch (const Error& err) {
    fail(ErrorCode::kConfig, std::string("invalid configuration: ") + err.what());
  }

  e.schedule.seed = config.seed;
  const std::size_t n = e.split.train.size();
  const std::size_t bs = config.bilevel.batch_size;
  const double per_epoch = bs == 0 || bs >= n ? 1.0 : std::ceil(static_cast<double>(n) / static_cast<double>(bs));
  if (config.epochs) e.schedule.steps = static_cast<std::size_t>(std::ceil(*config.epochs * per_epoch));
  if (config.warmup_epochs)
    e.schedule.warmup_steps = static_cast<std::size_t>(std::ceil(*config.warmup_epochs * per_epoch));

  std::vector<hyper::TransformSpec> transforms;
  std::vector<double> init;
  for (const auto& h : config.hyperparameters) {
    transforms.push_back(h.transform);
    init.push_back(h.init);
  }
  e.initial = hyper::HyperparamState::from_domain(names, transforms, init, config.sigma_init);
  return e;
}

std::string problem_class(const Experiment& e) {
  const auto& c = e.config;
  std::string cls = c.model.arch + " model with " + c.model.loss + " loss and regularizers [";
  for (std::size_t i = 0; i < c.regularizers.size(); ++i) cls += (i ? ", " : "") + c.regularizers[i].kind;
  return cls + "]";
}

std::optional<oracles::RidgeProblem> ridge_oracle(const Experiment& e) {
  const auto& c = e.config;
  if (c.model.arch != "linear" || c.model.bias || c.model.outputs != 1 || c.model.loss != "mse") return std::nullopt;
  if (c.regularizers.size() != 1 || c.regularizers[0].kind != "weight_decay") return std::nullopt;
  if (c.hyperparameters.size() != 1 || c.hyperparameters[0].transform.clamp) return std::nullopt;
  const auto kind = c.hyperparameters[0].transform.kind;
  if (kind != hyper::TransformKind::kExp && kind != hyper::TransformKind::kIdentity) return std::nullopt;
  oracles::RidgeProblem p;
  p.X = e.problem.train.x;
  p.t = e.problem.train.t;
  p.X_valid = e.problem.valid.x;
  p.t_valid = e.problem.valid.t;
  p.scaling = c.penalty_scaling;
  p.transform = kind == hyper::TransformKind::kExp ? oracles::LambdaTransform::kExp : oracles::LambdaTransform::kIdentity;
  return p;
}

Json record_to_json(const MetricsRecord& r, const std::vector<std::string>& names) {
  Json j;
  j["step"] = r.step;
  j["phase"] = r.phase;
  j["train_loss"] = num(r.train_loss);
  j["val_loss"] = num(r.val_loss);
  j["lambda"] = named(names, r.lambda);
  j["lambda_raw"] = named(names, r.lambda_raw);
  j["sigma"] = named(names, r.sigma);
  j["inner_grad_norm"] = num(r.inner_grad_norm);
  j["hyper_grad_norm"] = num(r.hyper_grad_norm);
  j["sigma_grad_norm"] = num(r.sigma_grad_norm);
  j["alignment"] = num(r.alignment);
  return j;
}

Json checkpoint_to_json(const TrainState& s, const bilevel::BilevelConfig& schedule) {
  Json j;
  j["format_version"] = kFormatVersion;
  j["method"] = bilevel::to_string(schedule.method);
  j["hypernet"] = hyper::to_string(s.net.kind());
  j["counters"] = {{"inner_steps", s.inner_steps},
                   {"outer_iterations", s.outer_iterations},
                   {"hyper_steps", s.hyper_steps},
                   {"sigma_steps", s.sigma_steps},
                   {"records", s.records}};
  j["hyperparameters"] = {{"names", s.hp.names},
                          {"lambda", tensor_json(s.hp.lambda)},
                          {"lambda0", tensor_json(s.hp.lambda0)},
                          {"log_sigma", tensor_json(s.hp.log_sigma)}};
  Json params = Json::array();
  for (const auto& p : s.net.params()) params.push_back({{"name", p.name}, {"value", tensor_json(p.value)}});
  j["params"] = params;
  Json opts;
  for (auto [name, opt] : {std::pair{"inner", &s.inner_opt}, {"hyper", &s.hyper_opt}, {"sigma", &s.sigma_opt}}) {
    Json slots = Json::array();
    for (const auto& sl : opt->slots()) slots.push_back(slot_json(sl));
    opts[name] = slots;
  }
  j["optimizers"] = opts;
  j["rng"] = {{"init", s.rng.init.serialize()},
              {"perturb", s.rng.perturb.serialize()},
              {"dropout", s.rng.dropout.serialize()},
              {"dropout_response", s.rng.dropout_response.serialize()},
              {"batch", s.rng.batch.serialize()}};
  j["batches"] = {{"order", s.batches.order}, {"cursor", s.batches.cursor}};
  return j;
}

void restore_checkpoint(TrainState& s, const Json& j) {
  try {
    require(j.at("format_version").get<int>() == kFormatVersion, ErrorCode::kIo,
            "unsupported checkpoint format_version " + j.at("format_version").dump());
    require(j.at("hypernet").get<std::string>() == hyper::to_string(s.net.kind()), ErrorCode::kConfig,
            "checkpoint hypernet '" + j.at("hypernet").get<std::string>() + "' does not match the config");
    const auto& c = j.at("counters");
    const auto& h = j.at("hyperparameters");
    require(h.at("names").get<std::vector<std::string>>() == s.hp.names, ErrorCode::kConfig,
            "checkpoint hyperparameter names do not match the config");
    auto& params = s.net.params();
    const auto& pj = j.at("params");
    require(pj.size() == params.size(), ErrorCode::kConfig, "checkpoint parameter count does not match the config");
    std::vector<Tensor> values;
    for (std::size_t i = 0; i < params.size(); ++i) {
      require(pj[i].at("name").get<std::string>() == params[i].name, ErrorCode::kConfig,
              "checkpoint parameter '" + pj[i].at("name").get<std::string>() + "' does not match '" +
                  params[i].name + "'");
      Tensor v = tensor_of(pj[i].at("value"), params[i].name);
      require(v.shape() == params[i].value.shape(), ErrorCode::kConfig,
              "checkpoint parameter '" + params[i].name + "' has shape " + shape_str(v.shape()));
      values.push_back(std::move(v));
    }
    s.net.set_values(values);
    s.hp.lambda = tensor_of(h.at("lambda"), "lambda");
    s.hp.lambda0 = tensor_of(h.at("lambda0"), "lambda0");
    s.hp.log_sigma = tensor_of(h.at("log_sigma"), "log_sigma");
    s.hp.validate();
    const auto& o = j.at("optimizers");
    restore_optimizer(s.inner_opt, o.at("inner"), "inner");
    restore_optimizer(s.hyper_opt, o.at("hyper"), "hyper");
    restore_optimizer(s.sigma_opt, o.at("sigma"), "sigma");
    const auto& r = j.at("rng");
    s.rng.init.deserialize(r.at("init").get<std::string>());
    s.rng.perturb.deserialize(r.at("perturb").get<std::string>());
    s.rng.dropout.deserialize(r.at("dropout").get<std::string>());
    s.rng.dropout_response.deserialize(r.at("dropout_response").get<std::string>());
    s.rng.batch.deserialize(r.at("batch").get<std::string>());
    s.batches.order = j.at("batches").at("order").get<std::vector<std::size_t>>();
    s.batches.cursor = j.at("batches").at("cursor").get<std::size_t>();
    s.inner_steps = c.at("inner_steps").get<std::size_t>();
    s.outer_iterations = c.at("outer_iterations").get<std::size_t>();
    s.hyper_steps = c.at("hyper_steps").get<std::size_t>();
    s.sigma_steps = c.at("sigma_steps").get<std::size_t>();
    s.records = c.at("records").get<std::size_t>();
  } catch (const Json::exception& e) {
    fail(ErrorCode::kIo, std::string("malformed checkpoint: ") + e.what());
  }
}

Json run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  const fs::path dir(options.output_dir.value_or(config.output_dir));
  if (config.tau_sweep.empty()) return run_single(config, dir, options.resume);

  config.validate();
  fs::create_directories(dir);
  Json sweep;
  sweep["format_version"] = kFormatVersion;
  sweep["name"] = config.name;
  Json runs = Json::array();
  std::optional<std::size_t> best;
  double best_val = 0;
  for (double tau : config.tau_sweep) {
    ExperimentConfig sub = config;
    sub.tau_sweep.clear();
    sub.bilevel.tau = tau;
    const fs::path sub_dir = dir / tau_label(tau);
    sub.output_dir = sub_dir.string();
    Json entry{{"tau", tau}, {"run_dir", sub_dir.string()}};
    try {
      Json summary = run_single(sub, sub_dir, options.resume);
      entry["status"] = "completed";
      entry["best_val_loss"] = summary["best_val_loss"];
      const double v = num_of(summary["best_val_loss"]);
      if (std::isfinite(v) && (!best || v < best_val)) {
        best = runs.size();
        best_val = v;
      }
    } catch (const bilevel::TrainingAborted& a) {
      entry["status"] = "aborted";
      entry["error"] = a.what();
    }
    runs.push_back(entry);
  }
  sweep["runs"] = runs;
  sweep["best"] = best ? runs[*best] : Json(nullptr);
  save_json((dir / "sweep.json").string(), sweep);
  require(best.has_value(), ErrorCode::kNonFinite, "every run of the entropy sweep aborted");
  return sweep;
}

Json load_json(const std::string& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    fail(ErrorCode::kConfig, "'" + path + "' is not valid JSON: " + e.what());
  }
}

void save_json(const std::string& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

oracles::RidgeProblem ridge_from_json(const Json& j) {
  oracles::RidgeProblem p;
  try {
    p.X = matrix_of(j.at("X"), "X");
    p.t = vector_of(j.at("t"), "t");
    p.X_valid = j.contains("X_valid") ? matrix_of(j["X_valid"], "X_valid") : p.X;
    p.t_valid = j.contains("t_valid") ? vector_of(j["t_valid"], "t_valid") : p.t;
    const auto tr = j.value("transform", std::string("exp"));
    require(tr == "exp" || tr == "identity", ErrorCode::kConfig, "transform must be exp or identity, got '" + tr + "'");
    p.transform = tr == "exp" ? oracles::LambdaTransform::kExp : oracles::LambdaTransform::kIdentity;
    const auto sc = j.value("scaling", std::string("per_n"));
    require(sc == "per_n" || sc == "unscaled", ErrorCode::kConfig, "scaling must be per_n or unscaled");
    p.scaling = sc == "per_n" ? models::PenaltyScaling::kPerN : models::PenaltyScaling::kUnscaled;
  } catch (const Json::exception& e) {
    fail(ErrorCode::kConfig, std::string("ridge problem: ") + e.what());
  }
  try {
    p.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kConfig, std::string("ridge problem: ") + e.what());
  }
  return p;
}

Json ridge_to_json(const oracles::RidgeProblem& p) {
  Json j;
  j["kind"] = "ridge";
  j["transform"] = p.transform == oracles::LambdaTransform::kExp ? "exp" : "identity";
  j["scaling"] = p.scaling == models::PenaltyScaling::kPerN ? "per_n" : "unscaled";
  j["X"] = rows_json(p.X);
  j["t"] = p.t.values();
  j["X_valid"] = rows_json(p.X_valid);
  j["t_valid"] = p.t_valid.values();
  return j;
}

oracles::QuadraticProblem quadratic_from_json(const Json& j) {
  oracles::QuadraticProblem q;
  try {
    q.A = matrix_of(j.at("A"), "A");
    q.B = matrix_of(j.at("B"), "B");
    const std::size_t h = q.B.cols();
    q.C = j.contains("C") ? matrix_of(j["C"], "C") : Tensor::zeros({h, h});
    q.d = j.contains("d") ? vector_of(j["d"], "d") : Tensor::zeros({q.A.rows()});
    q.e = j.contains("e") ? vector_of(j["e"], "e") : Tensor::zeros({h});
    q.c = j.value("c", 0.0);
  } catch (const Json::exception& e) {
    fail(ErrorCode::kConfig, std::string("quadratic problem: ") + e.what());
  }
  try {
    q.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kConfig, std::string("quadratic problem: ") + e.what());
  }
  return q;
}

Json quadratic_to_json(const oracles::QuadraticProblem& q) {
  return Json{{"kind", "quadratic"}, {"A", rows_json(q.A)}, {"B", rows_json(q.B)}, {"C", rows_json(q.C)},
              {"d", q.d.values()},   {"e", q.e.values()},   {"c", q.c}};
}

Json oracle_query(const Json& problem, const std::string& what) {
  const auto kind = problem.value("kind", std::string("ridge"));
  Json out;
  out["kind"] = kind;
  out["what"] = what;
  if (kind == "quadratic") {
    auto q = quadratic_from_json(problem);
    if (what == "jacobian") {
      out["jacobian"] = rows_json(oracles::quadratic_br_jacobian(q));
    } else if (what == "best-response") {
      require(problem.contains("lambda"), ErrorCode::kConfig, "quadratic best-response needs 'lambda'");
      Tensor lam = vector_of(problem["lambda"], "lambda");
      out["lambda"] = lam.values();
      out["w"] = oracles::quadratic_best_response(q, lam).values();
    } else {
      fail(ErrorCode::kInapplicable, "'" + what + "' is not defined for quadratic problems");
    }
    return out;
  }
  require(kind == "ridge", ErrorCode::kConfig, "unknown problem kind '" + kind + "' (expected ridge or quadratic)");
  auto p = ridge_from_json(problem);
  const bool is_exp = p.transform == oracles::LambdaTransform::kExp;
  auto lambda_domain = [&] {
    require(problem.contains("lambda"), ErrorCode::kConfig, "'" + what + "' needs 'lambda' (domain units)");
    return problem["lambda"].get<double>();
  };
  if (what == "best-response") {
    const double lam = lambda_domain();
    out["lambda"] = lam;
    out["w"] = oracles::ridge_best_response(p, lam).values();
  } else if (what == "jacobian") {
    const double lam = lambda_domain();
    out["lambda"] = lam;
    out["lambda_raw"] = p.to_raw(lam);
    out["jacobian"] = oracles::ridge_br_jacobian(p, lam).values();
  } else if (what == "bilevel") {
    std::vector<double> bracket = is_exp ? std::vector<double>{-10.0, 10.0} : std::vector<double>{1e-6, 1e3};
    if (problem.contains("bracket")) bracket = problem["bracket"].get<std::vector<double>>();
    require(bracket.size() == 2, ErrorCode::kConfig, "bracket must be [lo, hi] in raw units");
    auto sol = oracles::bilevel_solve(p, bracket[0], bracket[1], problem.value("allow_boundary", false));
    out["lambda_raw"] = sol.lambda_raw;
    out["lambda"] = p.to_domain(sol.lambda_raw);
    out["val_loss"] = sol.val_loss;
    out["at_boundary"] = sol.at_boundary;
    out["bracket"] = bracket;
  } else if (what == "biased-fixed-point") {
    const double lam = lambda_domain();
    const double sigma = problem.value("sigma", 1.0);
    Tensor theta = problem.contains("theta") ? vector_of(problem["theta"], "theta").reshaped({p.m(), 1})
                                             : oracles::ridge_br_jacobian(p, lam);
    Tensor biased = oracles::stn_biased_fixed_point(p, lam, theta, sigma);
    Tensor exact = oracles::ridge_best_response(p, lam);
    out["lambda"] = lam;
    out["sigma"] = sigma;
    out["theta"] = theta.values();
    out["w_biased"] = biased.values();
    out["w_star"] = exact.values();
    out["difference"] = (biased - exact).values();
  } else {
    fail(ErrorCode::kInvalidArgument,
         "unknown oracle query '" + what + "' (expected best-response, jacobian, bilevel or biased-fixed-point)");
  }
  return out;
}

Json compare_with_oracle(const std::string& run_dir, const Json& oracle) {
  const auto kind = oracle.value("kind", std::string("ridge"));
  auto run = load_run(run_dir);
  const auto& e = run.experiment;
  if (kind != "ridge" || !ridge_oracle(e))
    fail(ErrorCode::kInapplicable, "oracle inapplicable: the run is a " + problem_class(e) +
                                       " and the oracle is a '" + kind + "' problem; only ridge runs have one");
  auto p = ridge_from_json(oracle);
  require(p.m() == e.problem.model.num_weights(), ErrorCode::kConfig,
          "oracle has " + std::to_string(p.m()) + " features, the run " + std::to_string(e.problem.model.num_weights()));
  const bool is_exp = p.transform == oracles::LambdaTransform::kExp;
  std::vector<double> bracket = is_exp ? std::vector<double>{-10.0, 10.0} : std::vector<double>{1e-6, 1e3};
  if (oracle.contains("bracket")) bracket = oracle["bracket"].get<std::vector<double>>();
  auto sol = oracles::bilevel_solve(p, bracket[0], bracket[1], oracle.value("allow_boundary", false));

  const auto& s = run.state;
  const double lam_raw = s.hp.lambda[0];
  const double val_final = bilevel::center_validation_loss(s, e.problem);
  Tensor theta_star = oracles::ridge_br_jacobian(p, p.to_domain(lam_raw));
  Tensor theta = s.net.jacobian();
  const double jnorm = norm(theta_star);

  Json r;
  r["format_version"] = kFormatVersion;
  r["problem"] = "ridge";
  r["run_dir"] = run_dir;
  r["method"] = bilevel::to_string(e.schedule.method);
  r["lambda_star_raw"] = sol.lambda_raw;
  r["lambda_star"] = p.to_domain(sol.lambda_raw);
  r["lambda_final_raw"] = lam_raw;
  r["lambda_final"] = p.to_domain(lam_raw);
  r["lambda_error"] = std::abs(lam_raw - sol.lambda_raw);
  r["val_loss_star"] = sol.val_loss;
  r["val_loss_final"] = val_final;
  r["val_gap_rel"] = std::abs(val_final - sol.val_loss) / sol.val_loss;
  r["jacobian_error"] = num(jnorm > 0 ? norm(theta - theta_star) / jnorm : std::nan(""));
  Json dist = Json::array();
  const auto name = e.config.hyperparameters[0].name;
  for (const auto& rec : read_metrics(run_dir))
    dist.push_back(
        Json::array({rec["step"], std::abs(rec["lambda_raw"][name].get<double>() - sol.lambda_raw)}));
  r["distance"] = dist;
  return r;
}

constexpr std::size_t kMaxExactGaussNewton = 512;
constexpr std::size_t kGaussNewtonSamples = 32;

Json analyze_run(const std::string& run_dir, const std::string& what) {
  if (what != "conditioning" && what != "alignment" && what != "spike")
    fail(ErrorCode::kInvalidArgument, "unknown analysis '" + what + "' (expected conditioning, alignment or spike)");
  auto run = load_run(run_dir);
  const auto& e = run.experiment;
  const auto& s = run.state;
  const Tensor w = s.center_weights();
  const Tensor lam_t = s.hp.transformed();
  Json r;
  r["format_version"] = kFormatVersion;
  r["what"] = what;
  r["run_dir"] = run_dir;
  r["hypernet"] = hyper::to_string(s.net.kind());

  if (what == "conditioning") {
    const Tensor sigma = s.hp.sigma();
    const Tensor unc = analysis::homogeneous_moment(s.hp.lambda, sigma);
    const Tensor cen = analysis::homogeneous_moment(Tensor::zeros(s.hp.lambda.shape()), sigma);
    const std::size_t rows = std::min<std::size_t>(e.problem.train.size(), 64);
    const Tensor x = slice(e.problem.train.x, 0, 0, rows);
    const Tensor J = output_jacobian(e.problem, lam_t, w, x);
    const Tensor Hy = output_hessian(e.problem.model, e.problem.objective.loss, w, x);
    const Tensor Gw = matmul(transpose(J), matmul(Hy, J));
    const Json kg = condition_or_null(Gw);
    const double ku = analysis::spd_condition(unc), kc = analysis::spd_condition(cen);
    r["rows"] = rows;
    r["kappa_lambda_uncentered"] = ku;
    r["kappa_lambda_centered"] = kc;
    r["kappa_gw"] = kg;
    r["kappa_product_uncentered"] = kg.is_null() ? Json(nullptr) : Json(ku * kg.get<double>());
    r["kappa_product_centered"] = kg.is_null() ? Json(nullptr) : Json(kc * kg.get<double>());
    r["lambda_moment_uncentered"] = rows_json(unc);
    r["lambda_moment_centered"] = rows_json(cen);
    if (kg.is_null()) r["note"] = "weight-space Gauss-Newton is singular on the sampled rows";
    // Unfactored hypernetwork Gauss-Newton over sampled perturbations, for
    // comparison with the Kronecker products above.
    const std::size_t dim = (s.hp.size() + 1) * w.numel();
    if (dim <= kMaxExactGaussNewton) {
      RngStream draw(e.config.seed, "analysis");
      std::vector<analysis::GaussNewtonSample> su, sc;
      auto homog = [](const Tensor& v) { return concat({v, Tensor::ones({1})}, 0); };
      for (std::size_t k = 0; k < kGaussNewtonSamples; ++k) {
        Tensor eps(s.hp.lambda.shape());
        for (std::size_t i = 0; i < eps.numel(); ++i) eps[i] = sigma[i] * draw.normal();
        const Tensor lam_hat = s.hp.lambda + eps;
        const Tensor wk = s.net.respond(lam_hat, s.hp.lambda0);
        const Tensor Jk = output_jacobian(e.problem, hyper::transform_all(s.hp.transforms, lam_hat), wk, x);
        const Tensor Hk = output_hessian(e.problem.model, e.problem.objective.loss, wk, x);
        su.push_back({homog(lam_hat), Jk, Hk});
        sc.push_back({homog(eps), Jk, Hk});
      }
      r["kappa_gphi_uncentered"] = condition_or_null(analysis::hypernet_gauss_newton(su));
      r["kappa_gphi_centered"] = condition_or_null(analysis::hypernet_gauss_newton(sc));
      r["gphi_samples"] = kGaussNewtonSamples;
    } else {
      r["kappa_gphi_uncentered"] = nullptr;
      r["kappa_gphi_centered"] = nullptr;
      r["gphi_note"] = "hypernetwork Gauss-Newton has dimension " + std::to_string(dim) + " (limit " +
                       std::to_string(kMaxExactGaussNewton) + ")";
    }
  } else if (what == "alignment") {
    const Tensor gt = models::training_gradient(e.problem.model, e.problem.objective, lam_t, w, e.problem.train);
    const Tensor gv = models::validation_gradient(e.problem.model, e.problem.objective, lam_t, w, e.problem.valid);
    r["alignment_final"] = num(bilevel::gradient_alignment_at_center(s, e.problem));
    r["train_grad_norm"] = norm(gt);
    r["valid_grad_norm"] = norm(gv);
    Json series = Json::array();
    std::size_t positive = 0, total = 0;
    for (const auto& rec : read_metrics(run_dir)) {
      if (rec["alignment"].is_null()) continue;
      series.push_back(Json::array({rec["step"], rec["alignment"]}));
      ++total;
      if (rec["alignment"].get<double>() > 0) ++positive;
    }
    r["fraction_positive"] = total ? Json(static_cast<double>(positive) / static_cast<double>(total)) : Json(nullptr);
    r["series"] = series;
  } else {
    const Tensor gt = models::training_gradient(e.problem.model, e.problem.objective, lam_t, w, e.problem.train);
    const Tensor gv = models::validation_gradient(e.problem.model, e.problem.objective, lam_t, w, e.problem.valid);
    const double alpha = e.schedule.inner.lr;
    const Tensor uncentered = analysis::predicted_spike_term(gt, gv, lam_t, alpha);
    r["alpha"] = alpha;
    r["gT_dot_gV"] = dot(gt, gv);
    r["alignment"] = num(bilevel::gradient_alignment_at_center(s, e.problem));
    r["lambda"] = named(names_of(e.config), lam_t.values());
    r["spike_term_uncentered"] = named(names_of(e.config), uncentered.values());
    r["spike_term_centered"] = named(names_of(e.config), std::vector<double>(lam_t.numel(), 0.0));
    // Gradient descent on lambda moves it along -term.
    r["pushes_away_from_zero"] = dot(gt, gv) > 0;
  }
  return r;
}

Json search(const ExperimentConfig& config, bilevel::SearchKind kind, std::size_t budget) {
  Experiment e = prepare(config);
  std::vector<bilevel::SearchDim> space;
  for (const auto& h : config.hyperparameters) {
    if (!h.search_lo || !h.search_hi)
      fail(ErrorCode::kConfig, "hyperparameters: '" + h.name + "' has no search bounds");
    space.push_back({h.name, h.transform, *h.search_lo, *h.search_hi, {}});
  }
  auto res = bilevel::baseline_search(kind, space, budget, e.problem, e.schedule);
  const auto names = names_of(config);
  Json j;
  j["format_version"] = kFormatVersion;
  j["kind"] = kind == bilevel::SearchKind::kGrid ? "grid" : "random";
  j["budget"] = budget;
  j["steps_per_trial"] = e.schedule.warmup_steps + e.schedule.steps;
  j["best"] = named(names, res.best);
  j["best_val_loss"] = num(res.best_val_loss);
  j["best_index"] = res.best_index;
  Json trials = Json::array();
  for (const auto& t : res.trials) trials.push_back({{"lambda", named(names, t.lambda)}, {"val_loss", num(t.val_loss)}});
  j["trials"] = trials;
  return j;
}

std::vector<Json> read_metrics(const std::string& run_dir) {
  const std::string path = (fs::path(run_dir) / "metrics.jsonl").string();
  std::ifstream f(path);
  require(f.good(), ErrorCode::kIo, "no metrics in '" + run_dir + "'");
  std::vector<Json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const Json::parse_error&) {
      // A torn final line from an interrupted run is skipped.
      if (f.peek() == EOF) break;
      fail(ErrorCode::kIo, path + ": line " + std::to_string(lineno) + " is not valid JSON");
    }
  }
  return out;
}

std::vector<std::string> write_plotdata(const std::string& run_dir, const std::vector<std::string>& series,
                                        const std::string& out) {
  require(!series.empty(), ErrorCode::kInvalidArgument, "no series requested");
  const auto records = read_metrics(run_dir);
  auto value_of = [&](const Json& rec, const std::string& name) -> std::optional<Json> {
    const auto dot_pos = name.find('.');
    if (dot_pos == std::string::npos) {
      if (!rec.contains(name) || rec[name].is_object()) return std::nullopt;
      return rec[name];
    }
    const auto group = name.substr(0, dot_pos), key = name.substr(dot_pos + 1);
    if (!rec.contains(group) || !rec[group].is_object() || !rec[group].contains(key)) return std::nullopt;
    return rec[group][key];
  };
  for (const auto& s : series)
    if (!records.empty() && !value_of(records.front(), s))
      fail(ErrorCode::kInvalidArgument,
           "unknown series '" + s + "' (try train_loss, val_loss, lambda.<name>, lambda_raw.<name>, sigma.<name>, "
           "inner_grad_norm, hyper_grad_norm, sigma_grad_norm, alignment)");
  std::vector<std::string> paths;
  const fs::path base(out);
  for (const auto& s : series) {
    fs::path p = base;
    if (series.size() > 1) p = base.parent_path() / (base.stem().string() + "." + s + base.extension().string());
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ostringstream os;
    os.precision(17);
    for (const auto& rec : records) {
      auto v = value_of(rec, s);
      os << rec["step"].get<std::size_t>() << ' ';
      if (!v || v->is_null())
        os << "nan";
      else
        os << v->get<double>();
      os << '\n';
    }
    write_text(p.string(), os.str());
    paths.push_back(p.string());
  }
  return paths;
}

}  // namespace stn::harness
