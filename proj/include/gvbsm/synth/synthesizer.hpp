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
#include <random>
#include <string>
#include <vector>

#include "gvbsm/data/dataset.hpp"
#include "gvbsm/stats/stat_bank.hpp"
#include "gvbsm/synth/losses.hpp"
#include "gvbsm/zoo/backbone.hpp"

namespace gvbsm::synth {

/// Learnable distilled images, class-major: image i belongs to class i / ipc.
struct SyntheticDataset {
  ad::Array images;  // [ipc * classes, C, H, W], normalised pixel space
  std::vector<int> labels;
  int ipc = 0;
  int classes = 0;
  data::Normalization norm;
  std::vector<double> lower;  // per-channel clip range
  std::vector<double> upper;

  std::size_t size() const { return labels.size(); }
  bool operator==(const SyntheticDataset&) const = default;
};

enum class InitMode { kNoise, kRealInit };
InitMode parse_init_mode(const std::string& s);
std::string init_mode_name(InitMode m);

SyntheticDataset init_synthetic(const data::Dataset& real, int ipc, InitMode mode, std::uint64_t seed);

enum class PlanMode { kOriginal, kReorder };
PlanMode parse_plan_mode(const std::string& s);
std::string plan_mode_name(PlanMode m);

struct BatchPlan {
  PlanMode mode = PlanMode::kReorder;
  int classes_per_batch = 0;
  int samples_per_class = 0;
  std::vector<std::vector<std::size_t>> batches;  // image indices
};

/// original: batch s holds image s of every class. reorder: min(ipc, 10)
/// samples of each of ~target/spc classes per batch; needs ipc >= 2.
BatchPlan make_batch_plan(PlanMode mode, int ipc, int classes, int target_batch = 50);

struct SynthesisConfig {
  int iterations = 4000;  // per plan batch
  double lr = 0.05;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double adam_eps = 1e-8;
  bool cosine_lr = true;
  double alpha = 0.8;
  double tau_dd = 4.0;
  double beta_dr = 0.4;
  double w_ce = 1.0;
  double w_bn = 0.01;
  double w_conv = 0.01;
  double w_dd = 1.0;
  PlanMode plan = PlanMode::kReorder;
  int batch_size = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LossBreakdown {
  double ce = 0.0;
  double bn = 0.0;
  double conv = 0.0;
  double dd = 0.0;
  double total = 0.0;
  int backbone = -1;
  int dropped = 0;
};

struct AdamState {
  ad::Array m;
  ad::Array v;
  int t = 0;
};

/// One optimisation batch of the distilled set.
struct BatchState {
  ad::Array x;
  std::vector<int> labels;
  AdamState adam;
};

/// Streams of randomness consumed during synthesis; kept separate so that
/// loss weights do not perturb backbone draws.
struct SynthRng {
  std::mt19937_64 backbone;
  std::mt19937_64 drop;
  explicit SynthRng(std::uint64_t seed);
};

/// Uniform draw of a pool member index.
std::size_t draw_backbone(std::mt19937_64& rng, std::size_t pool_size);

/// Total = w_ce CE + w_bn L'_BN + w_conv L'_Conv + w_dd L_DD on `model`,
/// followed by one Adam update of st.x (clipped to [lower, upper]). Throws
/// NumericError listing every term when the total is not finite.
LossBreakdown synth_step(BatchState& st, const zoo::Model& model, const stats::StatBank& bank, EmaTotals& totals,
                         const SynthesisConfig& cfg, double lr, std::mt19937_64& drop_rng,
                         const std::vector<double>& lower, const std::vector<double>& upper);

struct SynthesisTrace {
  std::vector<int> draws;  // per backbone
  std::vector<LossBreakdown> first;
  std::vector<LossBreakdown> last;  // per plan batch
};

using SynthProgress = std::function<void(std::size_t batch, int iteration, const LossBreakdown&)>;

/// Runs every plan batch for cfg.iterations steps, drawing the matching
/// backbone uniformly per step. EMA totals are per backbone and live for the
/// whole run.
SyntheticDataset run_synthesis(const std::vector<const zoo::Model*>& pool,
                               const std::vector<const stats::StatBank*>& banks, SyntheticDataset init,
                               const SynthesisConfig& cfg, SynthesisTrace* trace = nullptr,
                               const SynthProgress& progress = {});

/// Directory with `manifest`, `images.bin`, `labels.bin` and optional
/// 8-bit previews (one PGM/PPM grid per class).
void save_synthetic(const SyntheticDataset& s, const std::filesystem::path& dir, bool previews = true);
SyntheticDataset load_synthetic(const std::filesystem::path& dir);
std::uint64_t synthetic_hash(const SyntheticDataset& s);

}  // namespace gvbsm::synth
