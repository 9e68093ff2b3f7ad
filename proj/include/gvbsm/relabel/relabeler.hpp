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
#include "gvbsm/synth/synthesizer.hpp"
#include "gvbsm/zoo/backbone.hpp"

namespace gvbsm::relabel {

// Scope of the Frobenius norm used by logit normalisation.
enum class LnScope { kBatch, kImage };
LnScope parse_ln_scope(const std::string& s);
std::string ln_scope_name(LnScope s);

struct EnsembleOptions {
  bool use_ln = true;
  LnScope scope = LnScope::kBatch;
};

struct EnsembleResult {
  ad::Array logits;                   // [B,K]
  std::vector<std::size_t> excluded;  // members dropped for a zero norm
  std::vector<std::string> warnings;
};

/// Mean of the pool's eval-mode logits. With LN each member is first scaled
/// by (mean member norm) / (own norm); members whose norm is zero are left
/// out with a warning.
EnsembleResult ensemble_logits(const ad::Array& x, const std::vector<const zoo::Model*>& pool,
                               const EnsembleOptions& opt = {});

struct SoftLabelRecord {
  std::uint32_t image = 0;
  std::uint64_t seed = 0;
  std::vector<float> logits;
  bool operator==(const SoftLabelRecord&) const = default;
};

/// Raw ensemble logits per (image, augmentation seed), sorted by that key.
struct SoftLabelStore {
  std::uint32_t images = 0;
  std::uint32_t classes = 0;
  std::uint32_t epochs = 0;
  bool use_ln = true;
  LnScope scope = LnScope::kBatch;
  bool flip = true;
  std::uint32_t crop_pad = 0;
  double tau_label = 1.0;
  std::uint64_t base_seed = 0;
  std::vector<SoftLabelRecord> records;

  /// Seed of the view of `image` used in `epoch`.
  std::uint64_t view_seed(std::uint32_t epoch, std::uint32_t image) const;
  const SoftLabelRecord* find(std::uint32_t image, std::uint64_t seed) const;
  void sort();

  bool operator==(const SoftLabelStore&) const = default;
};

/// softmax(z / tau) of one record.
std::vector<double> probabilities(const SoftLabelRecord& r, double tau);

struct RelabelConfig {
  int epochs = 1;
  std::uint64_t seed = 0;
  double tau_label = 1.0;
  EnsembleOptions ensemble;
  int crop_pad = 2;
  bool flip = true;
  int batch_size = 100;

  void validate() const;
};

/// Crop+flip view of image `i` for a view seed, as the evaluator replays it.
ad::Array augmented_view(const synth::SyntheticDataset& s, std::size_t i, std::uint64_t seed, int crop_pad, bool flip);

SoftLabelStore relabel_dataset(const synth::SyntheticDataset& s, const std::vector<const zoo::Model*>& pool,
                               const RelabelConfig& cfg, std::vector<std::string>* warnings = nullptr);

void save_store(const SoftLabelStore& store, const std::filesystem::path& path);
SoftLabelStore load_store(const std::filesystem::path& path);

}  // namespace gvbsm::relabel
