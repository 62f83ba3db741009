/* SPDX-License-Identifier: Apache-2.0 */
#ifndef STN_STN_H
#define STN_STN_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define STN_API __declspec(dllexport)
#else
#define STN_API __attribute__((visibility("default")))
#endif

typedef enum stn_status {
  STN_OK = 0,
  STN_ERR_INVALID_ARGUMENT = 1,
  STN_ERR_SHAPE = 2,
  STN_ERR_NON_FINITE = 3,
  STN_ERR_SINGULAR = 4,
  STN_ERR_NOT_POSITIVE_DEFINITE = 5,
  STN_ERR_CONFIG = 6,
  STN_ERR_IO = 7,
  STN_ERR_INAPPLICABLE = 8,
  STN_ERR_INTERNAL = 9
} stn_status;

/* Message for the last failing call on this thread; never NULL. */
STN_API const char* stn_last_error(void);
STN_API const char* stn_status_name(stn_status status);
STN_API const char* stn_version(void);

/* Strings returned through char** outputs are owned by the caller. */
STN_API void stn_string_free(char* s);

/* Experiment configuration. */
typedef struct stn_config stn_config;

STN_API stn_status stn_config_load(const char* path, stn_config** out);
STN_API stn_status stn_config_parse(const char* text, stn_config** out);
STN_API stn_status stn_config_serialize(const stn_config* config, char** out);
STN_API stn_status stn_config_set_seed(stn_config* config, uint64_t seed);
STN_API stn_status stn_config_set_output_dir(stn_config* config, const char* dir);
STN_API stn_status stn_config_set_steps(stn_config* config, size_t steps);
STN_API void stn_config_free(stn_config* config);

/* Runs the experiment into `output_dir` (NULL: the config's own) and
   returns the summary as JSON. `resume` continues from the checkpoint there. */
STN_API stn_status stn_train(const stn_config* config, const char* output_dir, int resume, char** summary_json);

/* JSON reports. */
STN_API stn_status stn_oracle(const char* problem_path, const char* what, char** out_json);
STN_API stn_status stn_analyze(const char* run_dir, const char* what, char** out_json);
STN_API stn_status stn_compare(const char* run_dir, const char* oracle_path, char** out_json);
STN_API stn_status stn_search(const stn_config* config, const char* kind, size_t budget, char** out_json);
/* `series` is a comma-separated list; returns the written paths as a JSON array. */
STN_API stn_status stn_plotdata(const char* run_dir, const char* series, const char* out_path, char** out_json);

/* Closed-form ridge oracle over row-major data. */
typedef struct stn_ridge stn_ridge;

/* transform: 0 = exp, 1 = identity. scaling: 0 = per-n, 1 = unscaled.
   Validation data may be NULL to reuse the training data. */
STN_API stn_status stn_ridge_create(const double* X, const double* t, size_t n, size_t m, const double* X_valid,
                                    const double* t_valid, size_t n_valid, int transform, int scaling,
                                    stn_ridge** out);
STN_API void stn_ridge_free(stn_ridge* ridge);
/* w (length m) */
STN_API stn_status stn_ridge_best_response(const stn_ridge* ridge, double lambda, double* w);
/* dw/dlambda_raw (length m) */
STN_API stn_status stn_ridge_jacobian(const stn_ridge* ridge, double lambda, double* jac);
STN_API stn_status stn_ridge_bilevel_solve(const stn_ridge* ridge, double lo, double hi, int allow_boundary,
                                           double* lambda_raw, double* val_loss);

#ifdef __cplusplus
}
#endif

#endif /* STN_STN_H */
