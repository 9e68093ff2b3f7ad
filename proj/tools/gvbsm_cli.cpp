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
// gvbsm command-line front end. Talks to the engine only through gvbsm.h.

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "gvbsm/gvbsm.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitNumeric = 4;

int exit_code(gvbsm_status s) {
  switch (s) {
    case GVBSM_OK: return kExitOk;
    case GVBSM_ERR_CONFIG:
    case GVBSM_ERR_INVALID_ARGUMENT: return kExitConfig;
    case GVBSM_ERR_MISSING_ARTIFACT:
    case GVBSM_ERR_FORMAT: return kExitMissing;
    case GVBSM_ERR_NUMERIC: return kExitNumeric;
    case GVBSM_ERR_INTERNAL: return kExitInternal;
  }
  return kExitInternal;
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string distilled;
  bool quiet = false;
  std::vector<std::string> sets;
  // Stage overrides, as (config key, literal).
  std::vector<std::pair<std::string, std::string>> overrides;
};

void log_line(const char* line, void* user) {
  if (!*static_cast<bool*>(user)) std::cerr << line << '\n';
}

int fail(gvbsm_status s, const std::string& context) {
  std::cerr << "gvbsm: " << context << ": " << gvbsm_status_name(s) << ": " << gvbsm_last_error() << '\n';
  return exit_code(s);
}

struct ConfigHandle {
  gvbsm_config* p = nullptr;
  ~ConfigHandle() { gvbsm_config_free(p); }
};

gvbsm_status build_config(const Options& o, ConfigHandle& h) {
  gvbsm_status s = o.config.empty() ? gvbsm_config_new(&h.p) : gvbsm_config_load(o.config.c_str(), &h.p);
  if (s != GVBSM_OK) return s;
  if (o.seed && (s = gvbsm_config_set_seed(h.p, *o.seed)) != GVBSM_OK) return s;
  if (!o.out.empty() && (s = gvbsm_config_set_out(h.p, o.out.c_str())) != GVBSM_OK) return s;
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) return gvbsm_config_set(h.p, kv.c_str(), "");
    if ((s = gvbsm_config_set(h.p, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str())) != GVBSM_OK) return s;
  }
  for (const auto& [key, value] : o.overrides) {
    if ((s = gvbsm_config_set(h.p, key.c_str(), value.c_str())) != GVBSM_OK) return s;
  }
  return GVBSM_OK;
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "JSON pipeline config")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "master seed");
  sub->add_option("--out", o.out, "output root");
  sub->add_option("--set", o.sets, "generic override key=value (e.g. eval.epochs=50)");
  sub->add_flag("--quiet,-q", o.quiet, "suppress progress lines");

  auto keyed = [&o, sub](const std::string& flag, const std::string& key, const std::string& help) {
    return sub->add_option_function<std::string>(
        flag, [&o, key](const std::string& v) { o.overrides.emplace_back(key, v); }, help);
  };
  keyed("--ipc", "synthesis.ipc", "images per class");
  keyed("--alpha", "synthesis.alpha", "EMA decay of the SDS totals");
  keyed("--beta-dr", "synthesis.beta_dr", "drop probability of statistic terms");
  keyed("--gamma", "eval.gamma", "weight of the hard-label term");
  keyed("--tau-dd", "synthesis.tau_dd", "DD temperature");
  keyed("--iterations", "synthesis.iterations", "synthesis iterations per batch");
  keyed("--wdd", "synthesis.w_dd", "weight of the DD loss");
  keyed("--wbn", "synthesis.w_bn", "weight of BN matching");
  keyed("--wconv", "synthesis.w_conv", "weight of conv matching");
  sub->add_option_function<std::string>(
         "--ln", [&o](const std::string& v) { o.overrides.emplace_back("relabel.ln", v == "on" ? "true" : "false"); },
         "logit normalisation during relabel")
      ->check(CLI::IsMember({"on", "off"}));
  sub->add_option_function<std::string>(
         "--batch-plan", [&o](const std::string& v) { o.overrides.emplace_back("synthesis.plan", "\"" + v + "\""); },
         "synthesis batch plan")
      ->check(CLI::IsMember({"original", "reorder"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gvbsm: dataset condensation by generalized backbone and statistic matching"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(gvbsm_version()));
  Options o;
  const std::vector<std::pair<std::string, std::string>> stages = {
      {"pretrain", "train the backbone pool on the real data"},
      {"capture-stats", "record BN and convolution statistics of every backbone"},
      {"synthesize", "optimise the distilled images"},
      {"relabel", "store ensemble soft labels for augmented views"},
      {"evaluate", "train an evaluation model on the distilled set"},
      {"pipeline", "run all stages"},
      {"diag", "diversity diagnostics of a distilled set"}};
  for (const auto& [name, help] : stages) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub, o);
    if (name == "diag") sub->add_option("--distilled", o.distilled, "distilled set directory");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  if (cmd == "diag") {
    std::string dir = o.distilled;
    if (dir.empty()) {
      if (o.out.empty()) {
        std::cerr << "gvbsm: diag needs --distilled or --out\n";
        return kExitConfig;
      }
      dir = o.out + "/distilled";
    }
    char* json = nullptr;
    const gvbsm_status s = gvbsm_diag(dir.c_str(), &json);
    if (s != GVBSM_OK) return fail(s, "diag");
    std::cout << json << '\n';
    gvbsm_string_free(json);
    return kExitOk;
  }

  ConfigHandle h;
  gvbsm_status s = build_config(o, h);
  if (s != GVBSM_OK) return fail(s, "config");
  if (cmd == "pipeline") {
    double acc = 0.0;
    s = gvbsm_run_pipeline(h.p, log_line, &o.quiet, &acc);
    if (s != GVBSM_OK) return fail(s, "pipeline");
    std::printf("accuracy %.4f\n", acc);
    return kExitOk;
  }
  char* summary = nullptr;
  s = gvbsm_run_stage(h.p, cmd.c_str(), log_line, &o.quiet, &summary);
  if (s != GVBSM_OK) return fail(s, cmd);
  std::cout << summary << '\n';
  gvbsm_string_free(summary);
  return kExitOk;
}
