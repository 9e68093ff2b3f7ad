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
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gvbsm/data/dataset.hpp"
#include "gvbsm/eval/evaluator.hpp"
#include "gvbsm/relabel/relabeler.hpp"
#include "gvbsm/synth/synthesizer.hpp"
#include "gvbsm/zoo/backbone.hpp"

namespace gvbsm::pipeline {

struct DatasetSection {
  std::string name = "digits-16";
  int train_per_class = 200;
  int test_per_class = 50;
  std::string path;
  std::string test_path;
};

struct PretrainSection {
  int epochs = 5;
  int batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double bn_momentum = 0.1;
  int crop_pad = 2;
};

struct CaptureSection {
  int n_p = 0;
  int batch_size = 50;
};

struct SynthesisSection {
  int ipc = 10;
  std::string init = "noise";
  std::vector<std::string> pool;  // empty: the whole pool
  synth::SynthesisConfig config;
};

struct RelabelSection {
  int epochs = 0;  // 0: as many as the evaluation runs
  bool ln = true;
  std::string ln_scope = "batch";
  double tau_label = 1.0;
  int crop_pad = 2;
  int batch_size = 0;  // 0: |S| when |S| <= 100, else 64
  std::vector<std::string> pool;
};

struct EvalSection {
  eval::EvalConfig config;
  std::optional<double> gamma;  // unset: dataset default
};

// Artifact directories, relative to `out`.
struct ArtifactPaths {
  std::string models = "models";
  std::string banks = "banks";
  std::string distilled = "distilled";
  std::string labels = "labels";
  std::string eval = "eval";
};

struct PipelineConfig {
  DatasetSection dataset;
  std::vector<std::string> pool{"tiny-resnet", "tiny-convnet-gn", "tiny-mobile", "tiny-shuffle"};
  PretrainSection pretrain;
  CaptureSection capture;
  SynthesisSection synthesis;
  RelabelSection relabel;
  EvalSection eval;
  ArtifactPaths paths;
  std::uint64_t seed = 0;
  std::string out = "run";

  void validate() const;
};

/// Strict parse: unknown keys and ill-typed values throw ConfigError.
PipelineConfig config_from_json(const std::string& text);
std::string config_to_json(const PipelineConfig& cfg);
PipelineConfig load_config(const std::filesystem::path& path);

/// Sets a dotted key (e.g. "synthesis.alpha") to a JSON literal; bare words
/// are taken as strings.
void set_key(PipelineConfig& cfg, const std::string& key, const std::string& value);

/// gamma of MSE+gamma*GT: explicit value or the dataset default.
double resolved_gamma(const PipelineConfig& cfg);

// Per-stage seeds, all derived from the master seed.
struct StageSeeds {
  std::uint64_t dataset, capture, synthesis, relabel, eval;
  std::uint64_t pretrain(const std::string& backbone) const;
  std::uint64_t master;
};
StageSeeds stage_seeds(std::uint64_t master);

data::Splits load_dataset(const PipelineConfig& cfg);

using Logger = std::function<void(const std::string&)>;

struct StageResult {
  std::string stage;
  std::string summary_json;
};

StageResult run_pretrain(const PipelineConfig& cfg, const Logger& log = {});
StageResult run_capture(const PipelineConfig& cfg, const Logger& log = {});
StageResult run_synthesize(const PipelineConfig& cfg, const Logger& log = {});
StageResult run_relabel(const PipelineConfig& cfg, const Logger& log = {});
StageResult run_evaluate(const PipelineConfig& cfg, const Logger& log = {});

/// Runs one named stage: pretrain, capture-stats, synthesize, relabel or
/// evaluate.
StageResult run_stage(const PipelineConfig& cfg, const std::string& stage, const Logger& log = {});

/// All five stages in order; returns the evaluation report.
eval::EvalReport run_pipeline(const PipelineConfig& cfg, const Logger& log = {});

std::string diag_json(const std::filesystem::path& distilled_dir);

/// Content hash of a file, or of a directory tree excluding stage.json.
std::uint64_t artifact_hash(const std::filesystem::path& path);

/// Configuration echoed by the last record of a run log.
PipelineConfig config_from_log(const std::filesystem::path& run_log);

}  // namespace gvbsm::pipeline
