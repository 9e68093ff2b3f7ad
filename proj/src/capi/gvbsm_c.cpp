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
#include "gvbsm/gvbsm.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "gvbsm/error.hpp"
#include "gvbsm/pipeline/pipeline.hpp"
#include "gvbsm/util/binio.hpp"

struct gvbsm_config {
  gvbsm::pipeline::PipelineConfig cfg;
};

namespace {

thread_local std::string g_last_error;

gvbsm_status status_of(gvbsm::ErrorKind k) {
  switch (k) {
    case gvbsm::ErrorKind::kInvalidArgument: return GVBSM_ERR_INVALID_ARGUMENT;
    case gvbsm::ErrorKind::kConfig: return GVBSM_ERR_CONFIG;
    case gvbsm::ErrorKind::kMissingArtifact: return GVBSM_ERR_MISSING_ARTIFACT;
    case gvbsm::ErrorKind::kNumeric: return GVBSM_ERR_NUMERIC;
    case gvbsm::ErrorKind::kFormat: return GVBSM_ERR_FORMAT;
  }
  return GVBSM_ERR_INTERNAL;
}

template <typename F>
gvbsm_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return GVBSM_OK;
  } catch (const gvbsm::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown error";
  }
  return GVBSM_ERR_INTERNAL;
}

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (p == nullptr) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void require(const void* p, const char* what) {
  if (p == nullptr) throw gvbsm::Error(gvbsm::ErrorKind::kInvalidArgument, std::string(what) + " is null");
}

gvbsm::pipeline::Logger make_logger(gvbsm_log_fn fn, void* user) {
  if (fn == nullptr) return {};
  return [fn, user](const std::string& line) { fn(line.c_str(), user); };
}

}  // namespace

extern "C" {

const char* gvbsm_version(void) { return "0.1.0"; }

const char* gvbsm_last_error(void) { return g_last_error.c_str(); }

const char* gvbsm_status_name(gvbsm_status s) {
  switch (s) {
    case GVBSM_OK: return "ok";
    case GVBSM_ERR_INVALID_ARGUMENT: return "invalid argument";
    case GVBSM_ERR_CONFIG: return "config error";
    case GVBSM_ERR_MISSING_ARTIFACT: return "missing artifact";
    case GVBSM_ERR_NUMERIC: return "numeric failure";
    case GVBSM_ERR_FORMAT: return "corrupt artifact";
    case GVBSM_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void gvbsm_string_free(char* s) { std::free(s); }

gvbsm_status gvbsm_config_new(gvbsm_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new gvbsm_config{};
  });
}

gvbsm_status gvbsm_config_from_json(const char* text, gvbsm_config** out) {
  return guarded([&] {
    require(text, "text");
    require(out, "out");
    *out = new gvbsm_config{gvbsm::pipeline::config_from_json(text)};
  });
}

gvbsm_status gvbsm_config_load(const char* path, gvbsm_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new gvbsm_config{gvbsm::pipeline::load_config(path)};
  });
}

void gvbsm_config_free(gvbsm_config* cfg) { delete cfg; }

gvbsm_status gvbsm_config_set(gvbsm_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "config");
    require(key, "key");
    require(value, "value");
    gvbsm::pipeline::set_key(cfg->cfg, key, value);
  });
}

gvbsm_status gvbsm_config_set_seed(gvbsm_config* cfg, uint64_t seed) {
  return guarded([&] {
    require(cfg, "config");
    cfg->cfg.seed = seed;
  });
}

gvbsm_status gvbsm_config_set_out(gvbsm_config* cfg, const char* out_dir) {
  return guarded([&] {
    require(cfg, "config");
    require(out_dir, "out_dir");
    if (*out_dir == '\0') throw gvbsm::ConfigError("out directory must not be empty");
    cfg->cfg.out = out_dir;
  });
}

gvbsm_status gvbsm_config_to_json(const gvbsm_config* cfg, char** out) {
  return guarded([&] {
    require(cfg, "config");
    require(out, "out");
    *out = dup(gvbsm::pipeline::config_to_json(cfg->cfg));
  });
}

gvbsm_status gvbsm_run_stage(const gvbsm_config* cfg, const char* stage, gvbsm_log_fn log, void* user,
                             char** summary_json) {
  return guarded([&] {
    require(cfg, "config");
    require(stage, "stage");
    const auto r = gvbsm::pipeline::run_stage(cfg->cfg, stage, make_logger(log, user));
    if (summary_json != nullptr) *summary_json = dup(r.summary_json);
  });
}

gvbsm_status gvbsm_run_pipeline(const gvbsm_config* cfg, gvbsm_log_fn log, void* user, double* accuracy) {
  return guarded([&] {
    require(cfg, "config");
    const auto rep = gvbsm::pipeline::run_pipeline(cfg->cfg, make_logger(log, user));
    if (accuracy != nullptr) *accuracy = rep.accuracy;
  });
}

gvbsm_status gvbsm_diag(const char* distilled_dir, char** json) {
  return guarded([&] {
    require(distilled_dir, "distilled_dir");
    require(json, "json");
    *json = dup(gvbsm::pipeline::diag_json(distilled_dir));
  });
}

gvbsm_status gvbsm_read_report(const char* eval_dir, char** json) {
  return guarded([&] {
    require(eval_dir, "eval_dir");
    require(json, "json");
    *json = dup(gvbsm::util::read_text(std::filesystem::path(eval_dir) / "report.json"));
  });
}

}  // extern "C"
