// SPDX-License-Identifier: Apache-2.0
#include "stn/stn.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <sstream>
#include <string>

#include "stn/error.hpp"
#include "stn/experiment.hpp"
#include "stn/oracles.hpp"

struct stn_config {
  stn::harness::ExperimentConfig value;
};

struct stn_ridge {
  stn::oracles::RidgeProblem value;
};

namespace {

thread_local std::string g_last_error;

stn_status status_of(stn::ErrorCode c) {
  switch (c) {
    case stn::ErrorCode::kInvalidArgument: return STN_ERR_INVALID_ARGUMENT;
    case stn::ErrorCode::kShapeMismatch: return STN_ERR_SHAPE;
    case stn::ErrorCode::kNonFinite: return STN_ERR_NON_FINITE;
    case stn::ErrorCode::kSingular: return STN_ERR_SINGULAR;
    case stn::ErrorCode::kNotPositiveDefinite: return STN_ERR_NOT_POSITIVE_DEFINITE;
    case stn::ErrorCode::kConfig: return STN_ERR_CONFIG;
    case stn::ErrorCode::kIo: return STN_ERR_IO;
    case stn::ErrorCode::kInapplicable: return STN_ERR_INAPPLICABLE;
  }
  return STN_ERR_INTERNAL;
}

template <typename F>
stn_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return STN_OK;
  } catch (const stn::Error& e) {
    g_last_error = e.what();
    return status_of(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return STN_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return STN_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return STN_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (!p) stn::fail(stn::ErrorCode::kInvalidArgument, std::string(what) + " is NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put_json(char** out, const stn::harness::Json& j) { *out = dup(j.dump(2)); }

stn::Tensor matrix(const double* p, std::size_t rows, std::size_t cols) {
  return stn::Tensor::from_external(stn::Shape{rows, cols}, std::vector<double>(p, p + rows * cols));
}

stn::Tensor vec(const double* p, std::size_t n) {
  return stn::Tensor::from_external(stn::Shape{n}, std::vector<double>(p, p + n));
}

}  // namespace

extern "C" {

const char* stn_last_error(void) { return g_last_error.c_str(); }

const char* stn_status_name(stn_status s) {
  switch (s) {
    case STN_OK: return "ok";
    case STN_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case STN_ERR_SHAPE: return "shape_mismatch";
    case STN_ERR_NON_FINITE: return "non_finite";
    case STN_ERR_SINGULAR: return "singular";
    case STN_ERR_NOT_POSITIVE_DEFINITE: return "not_positive_definite";
    case STN_ERR_CONFIG: return "config";
    case STN_ERR_IO: return "io";
    case STN_ERR_INAPPLICABLE: return "inapplicable";
    case STN_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* stn_version(void) { return "1.0.0"; }

void stn_string_free(char* s) { std::free(s); }

stn_status stn_config_load(const char* path, stn_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new stn_config{stn::harness::load_config(path)};
  });
}

stn_status stn_config_parse(const char* text, stn_config** out) {
  return guarded([&] {
    need(text, "text");
    need(out, "out");
    *out = new stn_config{stn::harness::parse_config(text)};
  });
}

stn_status stn_config_serialize(const stn_config* config, char** out) {
  return guarded([&] {
    need(config, "config");
    need(out, "out");
    *out = dup(stn::harness::serialize_config(config->value));
  });
}

stn_status stn_config_set_seed(stn_config* config, uint64_t seed) {
  return guarded([&] {
    need(config, "config");
    config->value.seed = seed;
    config->value.bilevel.seed = seed;
  });
}

stn_status stn_config_set_output_dir(stn_config* config, const char* dir) {
  return guarded([&] {
    need(config, "config");
    need(dir, "dir");
    require(*dir != '\0', stn::ErrorCode::kInvalidArgument, "output directory is empty");
    config->value.output_dir = dir;
  });
}

stn_status stn_config_set_steps(stn_config* config, size_t steps) {
  return guarded([&] {
    need(config, "config");
    config->value.bilevel.steps = steps;
    config->value.epochs.reset();
  });
}

void stn_config_free(stn_config* config) { delete config; }

stn_status stn_train(const stn_config* config, const char* output_dir, int resume, char** summary_json) {
  return guarded([&] {
    need(config, "config");
    stn::harness::RunOptions opts;
    if (output_dir) opts.output_dir = output_dir;
    opts.resume = resume != 0;
    auto summary = stn::harness::run_experiment(config->value, opts);
    if (summary_json) put_json(summary_json, summary);
  });
}

stn_status stn_oracle(const char* problem_path, const char* what, char** out_json) {
  return guarded([&] {
    need(problem_path, "problem_path");
    need(what, "what");
    need(out_json, "out_json");
    put_json(out_json, stn::harness::oracle_query(stn::harness::load_json(problem_path), what));
  });
}

stn_status stn_analyze(const char* run_dir, const char* what, char** out_json) {
  return guarded([&] {
    need(run_dir, "run_dir");
    need(what, "what");
    need(out_json, "out_json");
    put_json(out_json, stn::harness::analyze_run(run_dir, what));
  });
}

stn_status stn_compare(const char* run_dir, const char* oracle_path, char** out_json) {
  return guarded([&] {
    need(run_dir, "run_dir");
    need(oracle_path, "oracle_path");
    need(out_json, "out_json");
    put_json(out_json, stn::harness::compare_with_oracle(run_dir, stn::harness::load_json(oracle_path)));
  });
}

stn_status stn_search(const stn_config* config, const char* kind, size_t budget, char** out_json) {
  return guarded([&] {
    need(config, "config");
    need(kind, "kind");
    need(out_json, "out_json");
    put_json(out_json, stn::harness::search(config->value, stn::bilevel::search_kind_from_string(kind), budget));
  });
}

stn_status stn_plotdata(const char* run_dir, const char* series, const char* out_path, char** out_json) {
  return guarded([&] {
    need(run_dir, "run_dir");
    need(series, "series");
    need(out_path, "out_path");
    std::vector<std::string> names;
    std::stringstream ss(series);
    std::string s;
    while (std::getline(ss, s, ','))
      if (!s.empty()) names.push_back(s);
    auto paths = stn::harness::write_plotdata(run_dir, names, out_path);
    if (out_json) put_json(out_json, stn::harness::Json(paths));
  });
}

stn_status stn_ridge_create(const double* X, const double* t, size_t n, size_t m, const double* X_valid,
                            const double* t_valid, size_t n_valid, int transform, int scaling, stn_ridge** out) {
  return guarded([&] {
    need(X, "X");
    need(t, "t");
    need(out, "out");
    require(n > 0 && m > 0, stn::ErrorCode::kInvalidArgument, "ridge data must be non-empty");
    require(transform == 0 || transform == 1, stn::ErrorCode::kInvalidArgument, "transform must be 0 or 1");
    require(scaling == 0 || scaling == 1, stn::ErrorCode::kInvalidArgument, "scaling must be 0 or 1");
    stn::oracles::RidgeProblem p;
    p.X = matrix(X, n, m);
    p.t = vec(t, n);
    if (X_valid) {
      need(t_valid, "t_valid");
      p.X_valid = matrix(X_valid, n_valid, m);
      p.t_valid = vec(t_valid, n_valid);
    } else {
      p.X_valid = p.X;
      p.t_valid = p.t;
    }
    p.transform = transform == 0 ? stn::oracles::LambdaTransform::kExp : stn::oracles::LambdaTransform::kIdentity;
    p.scaling = scaling == 0 ? stn::models::PenaltyScaling::kPerN : stn::models::PenaltyScaling::kUnscaled;
    p.validate();
    *out = new stn_ridge{std::move(p)};
  });
}

void stn_ridge_free(stn_ridge* ridge) { delete ridge; }

stn_status stn_ridge_best_response(const stn_ridge* ridge, double lambda, double* w) {
  return guarded([&] {
    need(ridge, "ridge");
    need(w, "w");
    auto r = stn::oracles::ridge_best_response(ridge->value, lambda);
    std::copy(r.values().begin(), r.values().end(), w);
  });
}

stn_status stn_ridge_jacobian(const stn_ridge* ridge, double lambda, double* jac) {
  return guarded([&] {
    need(ridge, "ridge");
    need(jac, "jac");
    auto r = stn::oracles::ridge_br_jacobian(ridge->value, lambda);
    std::copy(r.values().begin(), r.values().end(), jac);
  });
}

stn_status stn_ridge_bilevel_solve(const stn_ridge* ridge, double lo, double hi, int allow_boundary,
                                   double* lambda_raw, double* val_loss) {
  return guarded([&] {
    need(ridge, "ridge");
    need(lambda_raw, "lambda_raw");
    auto sol = stn::oracles::bilevel_solve(ridge->value, lo, hi, allow_boundary != 0);
    *lambda_raw = sol.lambda_raw;
    if (val_loss) *val_loss = sol.val_loss;
  });
}

}  // extern "C"
