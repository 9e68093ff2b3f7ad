/* Copyright 2026 The gvbsm Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef GVBSM_GVBSM_H_
#define GVBSM_GVBSM_H_

/* C interface to the gvbsm dataset-condensation engine.
 *
 * Every call returns a gvbsm_status. On failure a human-readable message is
 * available from gvbsm_last_error() on the calling thread until the next
 * call. Strings returned through `char**` are owned by the caller and must be
 * released with gvbsm_string_free(). */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define GVBSM_API __declspec(dllexport)
#else
#define GVBSM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum gvbsm_status {
  GVBSM_OK = 0,
  GVBSM_ERR_INVALID_ARGUMENT = 1,
  GVBSM_ERR_CONFIG = 2,
  GVBSM_ERR_MISSING_ARTIFACT = 3,
  GVBSM_ERR_NUMERIC = 4,
  GVBSM_ERR_FORMAT = 5,
  GVBSM_ERR_INTERNAL = 6
} gvbsm_status;

typedef struct gvbsm_config gvbsm_config;

/* Receives one progress line per call. */
typedef void (*gvbsm_log_fn)(const char* line, void* user);

GVBSM_API const char* gvbsm_version(void);
GVBSM_API const char* gvbsm_last_error(void);
GVBSM_API const char* gvbsm_status_name(gvbsm_status s);
GVBSM_API void gvbsm_string_free(char* s);

/* Defaults, a JSON document, or a JSON file. */
GVBSM_API gvbsm_status gvbsm_config_new(gvbsm_config** out);
GVBSM_API gvbsm_status gvbsm_config_from_json(const char* text, gvbsm_config** out);
GVBSM_API gvbsm_status gvbsm_config_load(const char* path, gvbsm_config** out);
GVBSM_API void gvbsm_config_free(gvbsm_config* cfg);

/* Sets a dotted key such as "synthesis.alpha" to a JSON literal. */
GVBSM_API gvbsm_status gvbsm_config_set(gvbsm_config* cfg, const char* key, const char* value);
GVBSM_API gvbsm_status gvbsm_config_set_seed(gvbsm_config* cfg, uint64_t seed);
GVBSM_API gvbsm_status gvbsm_config_set_out(gvbsm_config* cfg, const char* out_dir);
GVBSM_API gvbsm_status gvbsm_config_to_json(const gvbsm_config* cfg, char** out);

/* stage: pretrain, capture-stats, synthesize, relabel or evaluate. The JSON
 * summary is optional (pass NULL). */
GVBSM_API gvbsm_status gvbsm_run_stage(const gvbsm_config* cfg, const char* stage, gvbsm_log_fn log, void* user,
                                       char** summary_json);
/* All stages; writes the evaluation accuracy when `accuracy` is non-null. */
GVBSM_API gvbsm_status gvbsm_run_pipeline(const gvbsm_config* cfg, gvbsm_log_fn log, void* user,
                                          double* accuracy);

/* Diversity of a distilled set directory: per-class cosine similarity and
 * smallest Gram eigenvalue, as JSON. */
GVBSM_API gvbsm_status gvbsm_diag(const char* distilled_dir, char** json);

/* Evaluation report (report.json) of an evaluation directory. */
GVBSM_API gvbsm_status gvbsm_read_report(const char* eval_dir, char** json);

#ifdef __cplusplus
}
#endif

#endif /* GVBSM_GVBSM_H_ */
