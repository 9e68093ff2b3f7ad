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
#include <algorithm>
#include <cmath>
#include <map>

#include "gvbsm/error.hpp"
#include "gvbsm/synth/losses.hpp"

namespace gvbsm::synth {

using ad::Array;
using ad::Shape;
using ad::Var;

namespace {

// Indices of each class in first-appearance order.
std::vector<std::vector<std::int64_t>> group_by_class(std::span<const int> labels) {
  std::vector<int> order;
  std::map<int, std::vector<std::int64_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& g = groups[labels[i]];
    if (g.empty()) order.push_back(labels[i]);
    g.push_back(static_cast<std::int64_t>(i));
  }
  std::vector<std::vector<std::int64_t>> out;
  for (int k : order) out.push_back(groups[k]);
  return out;
}

Var flatten_pooled(Var x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("dd_loss: expected [B,C,H,W], got " + ad::shape_str(s));
  Var h = x;
  const auto side = std::max(s[2], s[3]);
  if (side > kDdMaxSide) h = ad::avg_pool2d(x, static_cast<int>((side + kDdMaxSide - 1) / kDdMaxSide));
  const auto& hs = h.shape();
  return ad::reshape(h, Shape{hs[0], hs[1] * hs[2] * hs[3]});
}

Var zero(ad::Tape& t) { return t.constant(Array::scalar(0.0)); }

Var accumulate(Var acc, Var term) { return acc.valid() ? ad::add(acc, term) : term; }

void require_taps(const char* op, std::size_t taps, std::size_t bank, const std::string& backbone) {
  if (taps != bank) {
    throw ShapeError(std::string(op) + ": " + std::to_string(taps) + " taps but bank for '" + backbone + "' holds " +
                     std::to_string(bank) + " layers");
  }
}

}  // namespace

Var dd_loss(Var x, std::span<const int> labels, double tau) {
  if (!(tau > 0.0)) throw ConfigError("dd_loss: tau must be > 0");
  if (x.shape().empty() || static_cast<std::size_t>(x.shape()[0]) != labels.size()) {
    throw ShapeError("dd_loss: " + std::to_string(labels.size()) + " labels for batch " + ad::shape_str(x.shape()));
  }
  const Var flat = flatten_pooled(x);
  Var total;
  for (const auto& idx : group_by_class(labels)) {
    if (idx.size() < 2) continue;
    const Var xy = ad::take_rows(flat, idx);
    const Var gram = ad::matmul(xy, ad::transpose(xy));
    if (!gram.value().all_finite()) throw NumericError("dd_loss: non-finite Gram matrix entries");
    const Var eig = ad::eigvals_sym(gram);
    const Var p = ad::stop_grad(ad::softmax(ad::scale(eig, 1.0 / tau)));
    total = accumulate(total, ad::kl_div(p, ad::log_softmax(eig)));
  }
  return total.valid() ? total : zero(x.tape());
}

std::vector<std::vector<double>> class_spectra(const Array& x, std::span<const int> labels) {
  ad::Tape t;
  const Var flat = flatten_pooled(t.constant(x));
  std::vector<std::vector<double>> out;
  for (const auto& idx : group_by_class(labels)) {
    const Var xy = ad::take_rows(flat, idx);
    out.push_back(ad::eigvals_sym(ad::matmul(xy, ad::transpose(xy))).value().vec());
  }
  return out;
}

void EmaTotals::observe(std::size_t layer, Family f, const Array& stat) {
  if (layer >= layers.size()) layers.resize(layer + 1);
  Total& t = layers[layer][f];
  if (!t.initialized || t.value.shape() != stat.shape()) {
    t.value = stat;
    t.initialized = true;
    return;
  }
  for (std::size_t i = 0; i < stat.size(); ++i) t.value[i] = alpha * t.value[i] + (1.0 - alpha) * stat[i];
}

Var sds_term(Var stat, const Array& target, EmaTotals& totals, std::size_t layer, Family f) {
  if (stat.shape() != target.shape()) {
    throw ShapeError("sds: statistic " + ad::shape_str(stat.shape()) + " does not match bank entry " +
                     ad::shape_str(target.shape()));
  }
  totals.observe(layer, f, stat.value());
  ad::Tape& t = stat.tape();
  const Var total = t.constant(totals.layers[layer][f].value);
  const Var diff = ad::sub(stat, t.constant(target));
  return ad::l2_norm(ad::sub(diff, ad::stop_grad(ad::sub(stat, total))));
}

Var sds_bn_loss(const std::vector<zoo::BnTap>& taps, const stats::StatBank& bank, EmaTotals& totals) {
  const auto layers = bank.of_kind(stats::StatKind::kBn);
  require_taps("sds_bn_loss", taps.size(), layers.size(), bank.backbone);
  if (taps.empty()) return Var{};
  Var total;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const auto& ls = *layers[i];
    if (ls.layer != taps[i].layer) throw ShapeError("sds_bn_loss: tap/bank layer order differs");
    const auto l = static_cast<std::size_t>(ls.index);
    total = accumulate(total, sds_term(taps[i].mean, ls.channel_mean, totals, l, kChannelMean));
    total = accumulate(total, sds_term(taps[i].var, ls.channel_var, totals, l, kChannelVar));
  }
  return total;
}

Var bn_loss(const std::vector<zoo::BnTap>& taps, const stats::StatBank& bank) {
  const auto layers = bank.of_kind(stats::StatKind::kBn);
  require_taps("bn_loss", taps.size(), layers.size(), bank.backbone);
  if (taps.empty()) return Var{};
  Var total;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    ad::Tape& t = taps[i].mean.tape();
    total = accumulate(total, ad::l2_norm(ad::sub(taps[i].mean, t.constant(layers[i]->channel_mean))));
    total = accumulate(total, ad::l2_norm(ad::sub(taps[i].var, t.constant(layers[i]->channel_var))));
  }
  return total;
}

Var sds_conv_loss(const std::vector<zoo::ConvTap>& taps, const stats::StatBank& bank, EmaTotals& totals,
                  double beta_dr, std::mt19937_64& rng, DropRecord* record) {
  if (!(beta_dr >= 0.0 && beta_dr <= 1.0)) throw ConfigError("sds_conv_loss: beta_dr must lie in [0,1]");
  const auto layers = bank.of_kind(stats::StatKind::kConv);
  require_taps("sds_conv_loss", taps.size(), layers.size(), bank.backbone);
  if (taps.empty()) return Var{};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Var total;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const auto& ls = *layers[i];
    if (ls.layer != taps[i].layer) throw ShapeError("sds_conv_loss: tap/bank layer order differs");
    const auto l = static_cast<std::size_t>(ls.index);
    const Var f = taps[i].output;
    for (int fam = 0; fam < 4; ++fam) {
      const bool drop = u(rng) < beta_dr;
      if (record != nullptr) record->dropped.push_back(drop);
      if (drop) continue;
      Var stat;
      const Array* target = nullptr;
      switch (fam) {
        case kChannelMean: stat = ad::channel_mean(f); target = &ls.channel_mean; break;
        case kChannelVar: stat = ad::channel_var(f); target = &ls.channel_var; break;
        case kPatchMean: stat = ad::patch_mean(f, ls.n_p); target = &ls.patch_mean; break;
        default: stat = ad::patch_var(f, ls.n_p); target = &ls.patch_var; break;
      }
      total = accumulate(total, sds_term(stat, *target, totals, l, static_cast<Family>(fam)));
    }
  }
  return total.valid() ? total : zero(taps.front().output.tape());
}

Var conv_loss(const std::vector<zoo::ConvTap>& taps, const stats::StatBank& bank) {
  const auto layers = bank.of_kind(stats::StatKind::kConv);
  require_taps("conv_loss", taps.size(), layers.size(), bank.backbone);
  if (taps.empty()) return Var{};
  Var total;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const auto& ls = *layers[i];
    const Var f = taps[i].output;
    ad::Tape& t = f.tape();
    total = accumulate(total, ad::l2_norm(ad::sub(ad::channel_mean(f), t.constant(ls.channel_mean))));
    total = accumulate(total, ad::l2_norm(ad::sub(ad::channel_var(f), t.constant(ls.channel_var))));
    total = accumulate(total, ad::l2_norm(ad::sub(ad::patch_mean(f, ls.n_p), t.constant(ls.patch_mean))));
    total = accumulate(total, ad::l2_norm(ad::sub(ad::patch_var(f, ls.n_p), t.constant(ls.patch_var))));
  }
  return total;
}

}  // namespace gvbsm::synth
