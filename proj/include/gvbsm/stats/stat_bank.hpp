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
#include <string>
#include <vector>

#include "gvbsm/ad/array.hpp"
#include "gvbsm/data/dataset.hpp"
#include "gvbsm/util/binio.hpp"
#include "gvbsm/zoo/backbone.hpp"

namespace gvbsm::stats {

enum class StatKind { kBn, kConv };

/// Global statistics of one tapped layer. BN entries hold the running
/// statistics from pretraining; conv entries the captured channel and patch
/// statistics of the raw convolution output.
struct LayerStats {
  int index = 0;  // position in the bank
  int layer = 0;  // index into the backbone spec
  StatKind kind = StatKind::kConv;
  ad::Array channel_mean;  // [C]
  ad::Array channel_var;   // [C]
  ad::Array patch_mean;    // [ceil(H/n_p), ceil(W/n_p)], conv only
  ad::Array patch_var;
  int n_p = 0;
  bool operator==(const LayerStats&) const = default;
};

struct StatBank {
  std::string backbone;
  data::Fingerprint dataset;
  int n_p = 4;
  int batch_size = 50;
  std::uint64_t batches = 0;
  std::vector<LayerStats> layers;

  std::vector<const LayerStats*> of_kind(StatKind k) const;
  bool operator==(const StatBank&) const = default;
};

struct PatchStats {
  ad::Array mean;
  ad::Array var;
};

/// Cell-wise mean and biased variance over batch, channel and cell pixels.
PatchStats patch_reduce(const ad::Array& feature, int n_p);

/// 4 for inputs up to 64 pixels per side, 16 above.
int default_patch_size(int height, int width);
/// Cell size used on an h x w feature map: min(n_p, max(h, w)).
int layer_patch_size(int n_p, int h, int w);

struct CaptureOptions {
  int n_p = 0;  // 0 selects default_patch_size of the input
  int batch_size = 50;
};

/// One gradient-free eval-mode pass over `ds` in fixed batch order. Each
/// conv statistic is the arithmetic mean over batches of per-batch
/// statistics.
StatBank capture_stats(const zoo::Model& model, const data::Dataset& ds, const CaptureOptions& opt = {});

void save_bank(const StatBank& bank, const std::filesystem::path& dir,
               util::FloatWidth width = util::FloatWidth::kF64);

struct LoadExpectations {
  std::string backbone;                    // empty: not checked
  const data::Fingerprint* dataset = nullptr;  // null: not checked
};

/// Rejects missing, truncated or corrupt files (FormatError naming the file)
/// and a backbone name mismatch (ConfigError). A dataset fingerprint
/// mismatch is appended to `warnings`.
StatBank load_bank(const std::filesystem::path& dir, const LoadExpectations& expect = {},
                   std::vector<std::string>* warnings = nullptr);

}  // namespace gvbsm::stats
