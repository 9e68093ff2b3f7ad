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

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "gvbsm/ad/ops.hpp"
#include "gvbsm/stats/stat_bank.hpp"
#include "gvbsm/zoo/backbone.hpp"

namespace gvbsm::synth {

inline constexpr int kDdMaxSide = 32;

/// Sum over classes with >= 2 samples of
/// KL(stop_grad(softmax(S_y / tau)) || softmax(S_y)), S_y the ascending
/// eigenvalues of the class Gram matrix of the (pooled, flattened) batch.
ad::Var dd_loss(ad::Var x, std::span<const int> labels, double tau);

/// Eigenvalues of the per-class Gram matrices used by dd_loss, keyed by the
/// order classes first appear in `labels`.
std::vector<std::vector<double>> class_spectra(const ad::Array& x, std::span<const int> labels);

// Statistic families of a bank layer.
enum Family { kChannelMean = 0, kChannelVar = 1, kPatchMean = 2, kPatchVar = 3 };

struct Total {
  ad::Array value;
  bool initialized = false;
};

/// EMA-accumulated batch statistics of one backbone, indexed by bank layer
/// and family. A total is set to the first statistic it observes and follows
/// total = alpha * total + (1 - alpha) * stat afterwards.
struct EmaTotals {
  double alpha = 0.8;
  std::vector<std::array<Total, 4>> layers;

  explicit EmaTotals(double a = 0.8, std::size_t n_layers = 0) : alpha(a), layers(n_layers) {}
  void observe(std::size_t layer, Family f, const ad::Array& stat);
};

/// || stat - target - stop_grad(stat - total) ||_2 after updating `total`
/// with the current statistic.
ad::Var sds_term(ad::Var stat, const ad::Array& target, EmaTotals& totals, std::size_t layer, Family f);

/// SDS-form BN matching. Taps must align one-to-one with the bank's BN
/// layers. The matching losses return an invalid Var for a backbone without
/// layers of the matched kind.
ad::Var sds_bn_loss(const std::vector<zoo::BnTap>& taps, const stats::StatBank& bank, EmaTotals& totals);

/// Plain form sum_l ||mu_l - CM|| + ||var_l - CV||.
ad::Var bn_loss(const std::vector<zoo::BnTap>& taps, const stats::StatBank& bank);

struct DropRecord {
  std::vector<bool> dropped;  // one entry per (layer, family) in order
};

/// SDS-form conv matching over channel/patch mean/var. Each (layer, family)
/// term is dropped with probability beta_dr; dropped terms also skip their
/// EMA update.
ad::Var sds_conv_loss(const std::vector<zoo::ConvTap>& taps, const stats::StatBank& bank, EmaTotals& totals,
                      double beta_dr, std::mt19937_64& rng, DropRecord* record = nullptr);

/// Plain form of the conv matching loss, no dropping.
ad::Var conv_loss(const std::vector<zoo::ConvTap>& taps, const stats::StatBank& bank);

}  // namespace gvbsm::synth
