// SPDX-License-Identifier: Apache-2.0
#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "stn/error.hpp"
#include "stn/experiment.hpp"

namespace stn::harness {

namespace {

using hyper::TransformKind;
using hyper::TransformSpec;
using optim::OptimizerSpec;

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

const char* scaling_name(models::PenaltyScaling s) {
  return s == models::PenaltyScaling::kPerN ? "per_n" : "unscaled";
}

const char* perturbation_name(bilevel::PerturbationMode m) {
  return m == bilevel::PerturbationMode::kSample ? "sample" : "expected";
}

/// Collects every problem instead of stopping at the first.
class Reader {
 public:
  std::vector<std::string> errors;

  void error(const std::string& path, const std::string& msg) { errors.push_back(path + ": " + msg); }

  void check_keys(const YAML::Node& n, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!n.IsMap()) {
      error(path, "expected a mapping");
      return;
    }
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& kv : n) {
      const auto key = kv.first.as<std::string>();
      if (!ok.count(key)) error(path.empty() ? key : path + "." + key, "unknown key");
    }
  }

  template <typename T>
  void read(const YAML::Node& parent, const char* key, T& out, const std::string& path) {
    const YAML::Node n = parent[key];
    if (!n) return;
    try {
      out = n.as<T>();
    } catch (const YAML::Exception&) {
      error(join(path, key), "cannot read value '" + dump(n) + "'");
    }
  }

  void read_size(const YAML::Node& parent, const char* key, std::size_t& out, const std::string& path) {
    const YAML::Node n = parent[key];
    if (!n) return;
    long long v = 0;
    try {
      v = n.as<long long>();
    } catch (const YAML::Exception&) {
      error(join(path, key), "expected a non-negative integer, got '" + dump(n) + "'");
      return;
    }
    if (v < 0) {
      error(join(path, key), "expected a non-negative integer, got " + std::to_string(v));
      return;
    }
    out = static_cast<std::size_t>(v);
  }

  void read_opt(const YAML::Node& parent, const char* key, std::optional<double>& out, const std::string& path) {
    if (!parent[key]) return;
    double v = 0;
    read(parent, key, v, path);
    out = v;
  }

  static std::string join(const std::string& path, const char* key) { return path.empty() ? key : path + "." + key; }

  static std::string dump(const YAML::Node& n) {
    YAML::Emitter e;
    e << YAML::Flow << n;
    return e.c_str();
  }
};

TransformSpec read_transform(Reader& r, const YAML::Node& n, const std::string& path) {
  TransformSpec t;
  std::string kind;
  YAML::Node body;
  if (n.IsScalar()) {
    kind = n.as<std::string>();
  } else if (n.IsMap()) {
    r.check_keys(n, path, {"kind", "lo", "hi", "clamp"});
    r.read(n, "kind", kind, path);
    body = n;
  } else {
    r.error(path, "expected a transform name or mapping");
    return t;
  }
  if (kind == "exp") {
    t = TransformSpec::exp();
  } else if (kind == "identity") {
    t = TransformSpec::identity();
  } else if (kind == "softplus") {
    t = TransformSpec::softplus();
  } else if (kind == "sigmoid_range") {
    double lo = 0, hi = 1;
    if (body) {
      r.read(body, "lo", lo, path);
      r.read(body, "hi", hi, path);
    }
    if (!(lo < hi)) {
      r.error(path, "sigmoid_range needs lo < hi");
      return t;
    }
    t = TransformSpec::sigmoid_range(lo, hi);
  } else {
    r.error(path, "unknown transform '" + kind + "' (expected exp, identity, softplus or sigmoid_range)");
    return t;
  }
  if (body && body["clamp"]) {
    std::vector<double> c;
    r.read(body, "clamp", c, path);
    if (c.size() != 2 || !(c[0] < c[1]))
      r.error(path + ".clamp", "expected [lo, hi] with lo < hi");
    else
      t.clamp = std::pair{c[0], c[1]};
  }
  return t;
}

OptimizerSpec read_optimizer(Reader& r, const YAML::Node& n, OptimizerSpec spec, const std::string& path) {
  if (!n) return spec;
  r.check_keys(n, path, {"kind", "lr", "momentum", "rho", "beta1", "beta2", "eps"});
  if (!n.IsMap()) return spec;
  std::string kind = optim::to_string(spec.kind);
  r.read(n, "kind", kind, path);
  try {
    spec.kind = optim::optimizer_kind_from_string(kind);
  } catch (const Error& e) {
    r.error(path + ".kind", e.what());
  }
  r.read(n, "lr", spec.lr, path);
  r.read(n, "momentum", spec.momentum, path);
  r.read(n, "rho", spec.rho, path);
  r.read(n, "beta1", spec.beta1, path);
  r.read(n, "beta2", spec.beta2, path);
  r.read(n, "eps", spec.eps, path);
  return spec;
}

void emit_optimizer(YAML::Emitter& e, const OptimizerSpec& s) {
  e << YAML::Flow << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << optim::to_string(s.kind);
  e << YAML::Key << "lr" << YAML::Value << fmt(s.lr);
  if (s.kind == optim::OptimizerKind::kMomentum) e << YAML::Key << "momentum" << YAML::Value << fmt(s.momentum);
  if (s.kind == optim::OptimizerKind::kRmsprop) e << YAML::Key << "rho" << YAML::Value << fmt(s.rho);
  if (s.kind == optim::OptimizerKind::kAdam) {
    e << YAML::Key << "beta1" << YAML::Value << fmt(s.beta1);
    e << YAML::Key << "beta2" << YAML::Value << fmt(s.beta2);
  }
  if (s.kind != optim::OptimizerKind::kSgd && s.kind != optim::OptimizerKind::kMomentum)
    e << YAML::Key << "eps" << YAML::Value << fmt(s.eps);
  // Unused fields are still emitted when they differ from the defaults so
  // the round trip is exact.
  const OptimizerSpec d;
  if (s.kind != optim::OptimizerKind::kMomentum && s.momentum != d.momentum)
    e << YAML::Key << "momentum" << YAML::Value << fmt(s.momentum);
  if (s.kind != optim::OptimizerKind::kRmsprop && s.rho != d.rho) e << YAML::Key << "rho" << YAML::Value << fmt(s.rho);
  if (s.kind != optim::OptimizerKind::kAdam) {
    if (s.beta1 != d.beta1) e << YAML::Key << "beta1" << YAML::Value << fmt(s.beta1);
    if (s.beta2 != d.beta2) e << YAML::Key << "beta2" << YAML::Value << fmt(s.beta2);
  }
  if ((s.kind == optim::OptimizerKind::kSgd || s.kind == optim::OptimizerKind::kMomentum) && s.eps != d.eps)
    e << YAML::Key << "eps" << YAML::Value << fmt(s.eps);
  e << YAML::EndMap;
}

void emit_transform(YAML::Emitter& e, const TransformSpec& t) {
  const std::string name = t.kind == TransformKind::kExp        ? "exp"
                           : t.kind == TransformKind::kIdentity ? "identity"
                           : t.kind == TransformKind::kSoftplus ? "softplus"
                                                                : "sigmoid_range";
  if (t.kind != TransformKind::kSigmoidRange && !t.clamp) {
    e << name;
    return;
  }
  e << YAML::Flow << YAML::BeginMap << YAML::Key << "kind" << YAML::Value << name;
  if (t.kind == TransformKind::kSigmoidRange) {
    e << YAML::Key << "lo" << YAML::Value << fmt(t.lo);
    e << YAML::Key << "hi" << YAML::Value << fmt(t.hi);
  }
  if (t.clamp)
    e << YAML::Key << "clamp" << YAML::Value << YAML::Flow << YAML::BeginSeq << fmt(t.clamp->first)
      << fmt(t.clamp->second) << YAML::EndSeq;
  e << YAML::EndMap;
}

const std::set<std::string> kArchs = {"linear", "mlp", "linear_network", "cnn"};
const std::set<std::string> kActivations = {"identity", "relu", "tanh"};
const std::set<std::string> kLosses = {"mse", "cross_entropy"};
const std::set<std::string> kRegularizers = {"weight_decay", "input_dropout", "activation_dropout", "jacobian_norm"};

}  // namespace

void ExperimentConfig::validate() const {
  std::vector<std::string> errs;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };
  check(!name.empty(), "name: must not be empty");
  check(!output_dir.empty(), "output_dir: must not be empty");
  check(data.split > 0 && data.split < 1, "data.split: must be in (0, 1), got " + fmt(data.split));
  if (data.path.empty()) {
    const auto& g = data.generator;
    check(g.kind == "ridge" || g.kind == "nonlinear" || g.kind == "blobs",
          "data.generator.kind: unknown generator '" + g.kind + "'");
    check(g.n >= 2, "data.generator.n: must be at least 2");
    check(g.dim >= 1, "data.generator.dim: must be at least 1");
    check(g.noise >= 0 && std::isfinite(g.noise), "data.generator.noise: must be >= 0");
    check(g.kind != "blobs" || g.classes >= 2, "data.generator.classes: need at least 2");
  }
  check(kArchs.count(model.arch) == 1, "model.arch: unknown architecture '" + model.arch + "'");
  check(kActivations.count(model.activation) == 1, "model.activation: unknown activation '" + model.activation + "'");
  check(kLosses.count(model.loss) == 1, "model.loss: unknown loss '" + model.loss + "'");
  check(model.outputs >= 1, "model.outputs: must be at least 1");
  check(model.loss != "cross_entropy" || model.outputs >= 2, "model.outputs: cross_entropy needs at least 2 outputs");
  for (std::size_t h : model.hidden) check(h >= 1, "model.hidden: layer widths must be positive");
  check(model.arch != "mlp" || !model.hidden.empty(), "model.hidden: mlp needs at least one hidden layer");
  check(model.arch != "linear_network" || model.depth >= 1, "model.depth: must be at least 1");
  if (model.arch == "cnn") {
    const auto& c = model.conv;
    check(c.channels >= 1 && c.filters >= 1 && c.kernel >= 1, "model.conv: channels, filters and kernel must be >= 1");
    check(c.height >= c.kernel && c.width >= c.kernel, "model.conv: image must be at least kernel-sized");
  }

  std::set<std::string> names;
  for (std::size_t i = 0; i < hyperparameters.size(); ++i) {
    const auto& h = hyperparameters[i];
    const std::string path = "hyperparameters[" + std::to_string(i) + "]";
    check(!h.name.empty(), path + ".name: must not be empty");
    check(names.insert(h.name).second, path + ".name: duplicate '" + h.name + "'");
    try {
      hyper::inverse_transform(h.transform, h.init);
    } catch (const Error& e) {
      errs.push_back(path + ".init: " + e.what());
    }
    if (h.search_lo || h.search_hi) {
      auto [lo, hi] = h.transform.image();
      check(h.search_lo && h.search_hi && *h.search_lo <= *h.search_hi, path + ".search: expected [lo, hi] with lo <= hi");
      if (h.search_lo && h.search_hi)
        check(*h.search_lo >= lo && *h.search_hi <= hi, path + ".search: bounds leave the transform image");
    }
  }
  check(!hyperparameters.empty(), "hyperparameters: declare at least one");
  std::set<std::string> used;
  for (std::size_t i = 0; i < regularizers.size(); ++i) {
    const auto& r = regularizers[i];
    const std::string path = "regularizers[" + std::to_string(i) + "]";
    check(kRegularizers.count(r.kind) == 1, path + ".kind: unknown regularizer '" + r.kind + "'");
    check(names.count(r.hyper) == 1, path + ".hyper: no hyperparameter named '" + r.hyper + "'");
    check(r.kind != "activation_dropout" || r.site >= 1, path + ".site: activation dropout needs a hidden site >= 1");
    check(r.kind != "jacobian_norm" || model.arch == "linear_network" || model.arch == "linear",
          path + ".kind: jacobian_norm applies to linear networks only");
    used.insert(r.hyper);
  }
  for (const auto& h : hyperparameters)
    check(used.count(h.name) == 1, "hyperparameters: '" + h.name + "' is not used by any regularizer");
  check(sigma_init > 0 && std::isfinite(sigma_init), "sigma_init: must be positive");
  try {
    bilevel.validate();
  } catch (const Error& e) {
    errs.push_back(std::string("bilevel: ") + e.what());
  }
  check(!epochs || *epochs > 0, "schedule.epochs: must be positive");
  check(!warmup_epochs || *warmup_epochs >= 0, "schedule.warmup_epochs: must be >= 0");
  for (double t : tau_sweep) check(t >= 0 && std::isfinite(t), "sweep.tau: values must be >= 0");
  if (!errs.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errs) msg += "\n  " + e;
    fail(ErrorCode::kConfig, msg);
  }
}

ExperimentConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    fail(ErrorCode::kConfig, std::string("config is not valid YAML: ") + e.what());
  }
  require(root.IsMap(), ErrorCode::kConfig, "config must be a mapping");
  Reader r;
  ExperimentConfig c;
  r.check_keys(root, "",
               {"name", "seed", "output_dir", "data", "model", "regularizers", "penalty_scaling", "hyperparameters",
                "sigma_init", "method", "structured", "optimizers", "schedule", "perturbation", "training",
                "checkpoint_every", "log_wall_time", "sweep"});
  r.read(root, "name", c.name, "");
  if (root["seed"]) {
    std::size_t s = 0;
    r.read_size(root, "seed", s, "");
    c.seed = s;
  }
  r.read(root, "output_dir", c.output_dir, "");

  if (const auto d = root["data"]) {
    r.check_keys(d, "data", {"path", "generator", "split", "normalize"});
    r.read(d, "path", c.data.path, "data");
    if (const auto g = d["generator"]) {
      r.check_keys(g, "data.generator", {"kind", "n", "dim", "classes", "noise"});
      r.read(g, "kind", c.data.generator.kind, "data.generator");
      r.read_size(g, "n", c.data.generator.n, "data.generator");
      r.read_size(g, "dim", c.data.generator.dim, "data.generator");
      r.read_size(g, "classes", c.data.generator.classes, "data.generator");
      r.read(g, "noise", c.data.generator.noise, "data.generator");
    }
    r.read(d, "split", c.data.split, "data");
    r.read(d, "normalize", c.data.normalize, "data");
  }

  if (const auto m = root["model"]) {
    r.check_keys(m, "model", {"arch", "hidden", "activation", "depth", "outputs", "bias", "loss", "conv"});
    r.read(m, "arch", c.model.arch, "model");
    if (m["hidden"]) {
      std::vector<long long> hidden;
      r.read(m, "hidden", hidden, "model");
      c.model.hidden.clear();
      for (long long h : hidden) c.model.hidden.push_back(h > 0 ? static_cast<std::size_t>(h) : 0);
    }
    r.read(m, "activation", c.model.activation, "model");
    r.read_size(m, "depth", c.model.depth, "model");
    r.read_size(m, "outputs", c.model.outputs, "model");
    r.read(m, "bias", c.model.bias, "model");
    r.read(m, "loss", c.model.loss, "model");
    if (const auto cv = m["conv"]) {
      r.check_keys(cv, "model.conv", {"channels", "filters", "kernel", "height", "width"});
      r.read_size(cv, "channels", c.model.conv.channels, "model.conv");
      r.read_size(cv, "filters", c.model.conv.filters, "model.conv");
      r.read_size(cv, "kernel", c.model.conv.kernel, "model.conv");
      r.read_size(cv, "height", c.model.conv.height, "model.conv");
      r.read_size(cv, "width", c.model.conv.width, "model.conv");
    }
  }

  if (const auto regs = root["regularizers"]) {
    if (!regs.IsSequence()) r.error("regularizers", "expected a list");
    for (std::size_t i = 0; regs.IsSequence() && i < regs.size(); ++i) {
      const std::string path = "regularizers[" + std::to_string(i) + "]";
      RegularizerConfig rc;
      r.check_keys(regs[i], path, {"kind", "hyper", "site"});
      r.read(regs[i], "kind", rc.kind, path);
      r.read(regs[i], "hyper", rc.hyper, path);
      r.read_size(regs[i], "site", rc.site, path);
      c.regularizers.push_back(rc);
    }
  }
  if (root["penalty_scaling"]) {
    std::string s;
    r.read(root, "penalty_scaling", s, "");
    if (s == "per_n")
      c.penalty_scaling = models::PenaltyScaling::kPerN;
    else if (s == "unscaled")
      c.penalty_scaling = models::PenaltyScaling::kUnscaled;
    else
      r.error("penalty_scaling", "expected per_n or unscaled, got '" + s + "'");
  }
  if (const auto hs = root["hyperparameters"]) {
    if (!hs.IsSequence()) r.error("hyperparameters", "expected a list");
    for (std::size_t i = 0; hs.IsSequence() && i < hs.size(); ++i) {
      const std::string path = "hyperparameters[" + std::to_string(i) + "]";
      HyperparamConfig h;
      r.check_keys(hs[i], path, {"name", "transform", "init", "search"});
      r.read(hs[i], "name", h.name, path);
      if (hs[i]["transform"]) h.transform = read_transform(r, hs[i]["transform"], path + ".transform");
      if (!hs[i]["init"]) r.error(path + ".init", "missing (domain units)");
      r.read(hs[i], "init", h.init, path);
      if (hs[i]["search"]) {
        std::vector<double> b;
        r.read(hs[i], "search", b, path);
        if (b.size() != 2) {
          r.error(path + ".search", "expected [lo, hi]");
        } else {
          h.search_lo = b[0];
          h.search_hi = b[1];
        }
      }
      c.hyperparameters.push_back(h);
    }
  }
  r.read(root, "sigma_init", c.sigma_init, "");
  if (root["method"]) {
    std::string m;
    r.read(root, "method", m, "");
    try {
      c.bilevel.method = bilevel::method_from_string(m);
    } catch (const Error& e) {
      r.error("method", e.what());
    }
  }
  r.read(root, "structured", c.bilevel.structured, "");
  if (const auto o = root["optimizers"]) {
    r.check_keys(o, "optimizers", {"inner", "hyper", "sigma"});
    c.bilevel.inner = read_optimizer(r, o["inner"], c.bilevel.inner, "optimizers.inner");
    c.bilevel.hyper = read_optimizer(r, o["hyper"], c.bilevel.hyper, "optimizers.hyper");
    c.bilevel.sigma = read_optimizer(r, o["sigma"], c.bilevel.sigma, "optimizers.sigma");
  }
  if (const auto s = root["schedule"]) {
    r.check_keys(s, "schedule", {"T_train", "T_valid", "steps", "warmup_steps", "epochs", "warmup_epochs", "batch_size"});
    r.read_size(s, "T_train", c.bilevel.T_train, "schedule");
    r.read_size(s, "T_valid", c.bilevel.T_valid, "schedule");
    r.read_size(s, "steps", c.bilevel.steps, "schedule");
    r.read_size(s, "warmup_steps", c.bilevel.warmup_steps, "schedule");
    r.read_opt(s, "epochs", c.epochs, "schedule");
    r.read_opt(s, "warmup_epochs", c.warmup_epochs, "schedule");
    r.read_size(s, "batch_size", c.bilevel.batch_size, "schedule");
  }
  if (const auto p = root["perturbation"]) {
    r.check_keys(p, "perturbation", {"mode", "tau", "freeze_sigma"});
    if (p["mode"]) {
      std::string m;
      r.read(p, "mode", m, "perturbation");
      if (m == "sample")
        c.bilevel.perturbation = bilevel::PerturbationMode::kSample;
      else if (m == "expected")
        c.bilevel.perturbation = bilevel::PerturbationMode::kExpected;
      else
        r.error("perturbation.mode", "expected sample or expected, got '" + m + "'");
    }
    r.read(p, "tau", c.bilevel.tau, "perturbation");
    r.read(p, "freeze_sigma", c.bilevel.freeze_sigma, "perturbation");
  }
  if (const auto t = root["training"]) {
    r.check_keys(t, "training", {"train_response", "update_hyper", "linearize", "linearize_outer", "diagnostics"});
    r.read(t, "train_response", c.bilevel.train_response, "training");
    r.read(t, "update_hyper", c.bilevel.update_hyper, "training");
    r.read(t, "linearize", c.bilevel.linearize, "training");
    r.read(t, "linearize_outer", c.bilevel.linearize_outer, "training");
    r.read(t, "diagnostics", c.bilevel.diagnostics, "training");
  }
  r.read_size(root, "checkpoint_every", c.checkpoint_every, "");
  r.read(root, "log_wall_time", c.log_wall_time, "");
  if (const auto sw = root["sweep"]) {
    r.check_keys(sw, "sweep", {"tau"});
    r.read(sw, "tau", c.tau_sweep, "sweep");
  }
  c.bilevel.seed = c.seed;

  if (!r.errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : r.errors) msg += "\n  " + e;
    fail(ErrorCode::kConfig, msg);
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), ErrorCode::kConfig, "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const Error& e) {
    fail(e.code(), path + ": " + e.what());
  }
}

std::string serialize_config(const ExperimentConfig& c) {
  YAML::Emitter e;
  e << YAML::BeginMap;
  e << YAML::Key << "name" << YAML::Value << c.name;
  e << YAML::Key << "seed" << YAML::Value << c.seed;
  e << YAML::Key << "output_dir" << YAML::Value << c.output_dir;

  e << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  if (!c.data.path.empty()) e << YAML::Key << "path" << YAML::Value << c.data.path;
  const auto& g = c.data.generator;
  e << YAML::Key << "generator" << YAML::Value << YAML::Flow << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << g.kind << YAML::Key << "n" << YAML::Value << g.n;
  e << YAML::Key << "dim" << YAML::Value << g.dim << YAML::Key << "classes" << YAML::Value << g.classes;
  e << YAML::Key << "noise" << YAML::Value << fmt(g.noise) << YAML::EndMap;
  e << YAML::Key << "split" << YAML::Value << fmt(c.data.split);
  e << YAML::Key << "normalize" << YAML::Value << c.data.normalize;
  e << YAML::EndMap;

  const auto& m = c.model;
  e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "arch" << YAML::Value << m.arch;
  e << YAML::Key << "hidden" << YAML::Value << YAML::Flow << m.hidden;
  e << YAML::Key << "activation" << YAML::Value << m.activation;
  e << YAML::Key << "depth" << YAML::Value << m.depth;
  e << YAML::Key << "outputs" << YAML::Value << m.outputs;
  e << YAML::Key << "bias" << YAML::Value << m.bias;
  e << YAML::Key << "loss" << YAML::Value << m.loss;
  e << YAML::Key << "conv" << YAML::Value << YAML::Flow << YAML::BeginMap;
  e << YAML::Key << "channels" << YAML::Value << m.conv.channels << YAML::Key << "filters" << YAML::Value
    << m.conv.filters;
  e << YAML::Key << "kernel" << YAML::Value << m.conv.kernel << YAML::Key << "height" << YAML::Value << m.conv.height;
  e << YAML::Key << "width" << YAML::Value << m.conv.width << YAML::EndMap;
  e << YAML::EndMap;

  e << YAML::Key << "regularizers" << YAML::Value << YAML::BeginSeq;
  for (const auto& r : c.regularizers) {
    e << YAML::Flow << YAML::BeginMap << YAML::Key << "kind" << YAML::Value << r.kind;
    e << YAML::Key << "hyper" << YAML::Value << r.hyper;
    if (r.site != 0) e << YAML::Key << "site" << YAML::Value << r.site;
    e << YAML::EndMap;
  }
  e << YAML::EndSeq;
  e << YAML::Key << "penalty_scaling" << YAML::Value << scaling_name(c.penalty_scaling);

  e << YAML::Key << "hyperparameters" << YAML::Value << YAML::BeginSeq;
  for (const auto& h : c.hyperparameters) {
    e << YAML::BeginMap << YAML::Key << "name" << YAML::Value << h.name;
    e << YAML::Key << "transform" << YAML::Value;
    emit_transform(e, h.transform);
    e << YAML::Key << "init" << YAML::Value << fmt(h.init);
    if (h.search_lo && h.search_hi)
      e << YAML::Key << "search" << YAML::Value << YAML::Flow << YAML::BeginSeq << fmt(*h.search_lo)
        << fmt(*h.search_hi) << YAML::EndSeq;
    e << YAML::EndMap;
  }
  e << YAML::EndSeq;
  e << YAML::Key << "sigma_init" << YAML::Value << fmt(c.sigma_init);

  const auto& b = c.bilevel;
  e << YAML::Key << "method" << YAML::Value << bilevel::to_string(b.method);
  e << YAML::Key << "structured" << YAML::Value << b.structured;
  e << YAML::Key << "optimizers" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "inner" << YAML::Value;
  emit_optimizer(e, b.inner);
  e << YAML::Key << "hyper" << YAML::Value;
  emit_optimizer(e, b.hyper);
  e << YAML::Key << "sigma" << YAML::Value;
  emit_optimizer(e, b.sigma);
  e << YAML::EndMap;

  e << YAML::Key << "schedule" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "T_train" << YAML::Value << b.T_train;
  e << YAML::Key << "T_valid" << YAML::Value << b.T_valid;
  e << YAML::Key << "steps" << YAML::Value << b.steps;
  e << YAML::Key << "warmup_steps" << YAML::Value << b.warmup_steps;
  if (c.epochs) e << YAML::Key << "epochs" << YAML::Value << fmt(*c.epochs);
  if (c.warmup_epochs) e << YAML::Key << "warmup_epochs" << YAML::Value << fmt(*c.warmup_epochs);
  e << YAML::Key << "batch_size" << YAML::Value << b.batch_size;
  e << YAML::EndMap;

  e << YAML::Key << "perturbation" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "mode" << YAML::Value << perturbation_name(b.perturbation);
  e << YAML::Key << "tau" << YAML::Value << fmt(b.tau);
  e << YAML::Key << "freeze_sigma" << YAML::Value << b.freeze_sigma;
  e << YAML::EndMap;

  e << YAML::Key << "training" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "train_response" << YAML::Value << b.train_response;
  e << YAML::Key << "update_hyper" << YAML::Value << b.update_hyper;
  e << YAML::Key << "linearize" << YAML::Value << b.linearize;
  e << YAML::Key << "linearize_outer" << YAML::Value << b.linearize_outer;
  e << YAML::Key << "diagnostics" << YAML::Value << b.diagnostics;
  e << YAML::EndMap;

  e << YAML::Key << "checkpoint_every" << YAML::Value << c.checkpoint_every;
  e << YAML::Key << "log_wall_time" << YAML::Value << c.log_wall_time;
  if (!c.tau_sweep.empty()) {
    e << YAML::Key << "sweep" << YAML::Value << YAML::BeginMap << YAML::Key << "tau" << YAML::Value << YAML::Flow
      << YAML::BeginSeq;
    for (double t : c.tau_sweep) e << fmt(t);
    e << YAML::EndSeq << YAML::EndMap;
  }
  e << YAML::EndMap;
  require(e.good(), ErrorCode::kConfig, std::string("cannot serialize config: ") + e.GetLastError());
  return std::string(e.c_str()) + "\n";
}

}  // namespace stn::harness
