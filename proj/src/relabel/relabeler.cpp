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
#include "gvbsm/relabel/relabeler.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gvbsm/data/dataset.hpp"
#include "gvbsm/error.hpp"
#include "gvbsm/util/binio.hpp"
#include "gvbsm/util/hash.hpp"

namespace gvbsm::relabel {

using ad::Array;
using ad::Shape;

namespace {

constexpr char kMagic[4] = {'G', 'V', 'S', 'L'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 4 * 4 + 4 + 4 + 8 + 8 + 8;

double frobenius(const double* p, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += p[i] * p[i];
  return std::sqrt(s);
}

// Averages rows [row0, row0 + rows) of the members' logits into out,
// rescaling each member to the mean norm when LN is on.
void combine(const std::vector<Array>& logits, std::size_t row0, std::size_t rows, std::size_t k, bool use_ln,
             const std::string& where, Array& out, std::vector<bool>& used, std::vector<std::string>& warnings) {
  const std::size_t m = logits.size();
  std::vector<double> norms(m, 1.0);
  std::vector<bool> ok(m, true);
  double target = 0.0;
  std::size_t live = m;
  if (use_ln) {
    live = 0;
    for (std::size_t j = 0; j < m; ++j) {
      norms[j] = frobenius(logits[j].ptr() + row0 * k, rows * k);
      ok[j] = norms[j] > 0.0;
      if (ok[j]) {
        target += norms[j];
        ++live;
      } else {
        warnings.push_back("member " + std::to_string(j) + " has zero logit norm" + where + "; excluded");
      }
    }
    if (live == 0) throw NumericError("ensemble: every member has zero logit norm" + where);
    target /= static_cast<double>(live);
  }
  for (std::size_t j = 0; j < m; ++j) {
    if (!ok[j]) continue;
    used[j] = true;
    const double s = use_ln ? target / norms[j] : 1.0;
    const double* src = logits[j].ptr() + row0 * k;
    double* dst = out.ptr() + row0 * k;
    for (std::size_t i = 0; i < rows * k; ++i) dst[i] += s * src[i];
  }
  for (std::size_t i = 0; i < rows * k; ++i) out[row0 * k + i] /= static_cast<double>(live);
}

}  // namespace

LnScope parse_ln_scope(const std::string& s) {
  if (s == "batch") return LnScope::kBatch;
  if (s == "image") return LnScope::kImage;
  throw ConfigError("unknown LN scope '" + s + "' (expected batch or image)");
}

std::string ln_scope_name(LnScope s) { return s == LnScope::kBatch ? "batch" : "image"; }

EnsembleResult ensemble_logits(const Array& x, const std::vector<const zoo::Model*>& pool,
                               const EnsembleOptions& opt) {
  if (pool.empty()) throw ConfigError("ensemble: empty backbone pool");
  const int classes = pool.front()->spec().classes;
  for (const auto* m : pool) {
    if (m->spec().classes != classes) throw ConfigError("ensemble: pool members disagree on class count");
  }
  std::vector<Array> logits;
  for (const auto* m : pool) {
    logits.push_back(m->predict(x));
    if (!logits.back().all_finite()) throw NumericError("ensemble: non-finite logits from " + m->spec().name);
  }
  const auto b = static_cast<std::size_t>(x.dim(0));
  const auto k = static_cast<std::size_t>(classes);
  EnsembleResult res;
  res.logits = Array(Shape{static_cast<std::int64_t>(b), classes}, 0.0);
  std::vector<bool> used(pool.size(), false);
  if (opt.use_ln && opt.scope == LnScope::kImage) {
    for (std::size_t i = 0; i < b; ++i) {
      combine(logits, i, 1, k, true, " for image " + std::to_string(i), res.logits, used, res.warnings);
    }
  } else {
    combine(logits, 0, b, k, opt.use_ln, "", res.logits, used, res.warnings);
  }
  for (std::size_t j = 0; j < pool.size(); ++j)
    if (!used[j]) res.excluded.push_back(j);
  return res;
}

std::uint64_t SoftLabelStore::view_seed(std::uint32_t epoch, std::uint32_t image) const {
  return util::derive_seed(base_seed, epoch, image);
}

const SoftLabelRecord* SoftLabelStore::find(std::uint32_t image, std::uint64_t seed) const {
  auto it = std::lower_bound(records.begin(), records.end(), std::make_pair(image, seed),
                             [](const SoftLabelRecord& r, const std::pair<std::uint32_t, std::uint64_t>& key) {
                               return std::make_pair(r.image, r.seed) < key;
                             });
  if (it == records.end() || it->image != image || it->seed != seed) return nullptr;
  return &*it;
}

void SoftLabelStore::sort() {
  std::sort(records.begin(), records.end(), [](const SoftLabelRecord& a, const SoftLabelRecord& b) {
    return std::make_pair(a.image, a.seed) < std::make_pair(b.image, b.seed);
  });
}

std::vector<double> probabilities(const SoftLabelRecord& r, double tau) {
  if (!(tau > 0.0)) throw ConfigError("probabilities: temperature must be positive");
  std::vector<double> p(r.logits.size());
  double mx = -INFINITY;
  for (float z : r.logits) mx = std::max(mx, static_cast<double>(z) / tau);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(static_cast<double>(r.logits[i]) / tau - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

void RelabelConfig::validate() const {
  if (epochs < 1) throw ConfigError("relabel: epochs must be >= 1");
  if (!(tau_label > 0.0)) throw ConfigError("relabel: tau_label must be positive");
  if (crop_pad < 0) throw ConfigError("relabel: crop_pad must be >= 0");
  if (batch_size < 1) throw ConfigError("relabel: batch_size must be >= 1");
}

Array augmented_view(const synth::SyntheticDataset& s, std::size_t i, std::uint64_t seed, int crop_pad, bool flip) {
  const int c = static_cast<int>(s.images.dim(1));
  const int h = static_cast<int>(s.images.dim(2));
  const int w = static_cast<int>(s.images.dim(3));
  const std::size_t n = static_cast<std::size_t>(c) * h * w;
  Array out(Shape{1, c, h, w});
  const auto p = data::augment_for_seed(seed, crop_pad, flip);
  apply_augment(p, std::span<const double>(s.images.ptr() + i * n, n), out.data(), c, h, w, s.lower);
  return out;
}

SoftLabelStore relabel_dataset(const synth::SyntheticDataset& s, const std::vector<const zoo::Model*>& pool,
                               const RelabelConfig& cfg, std::vector<std::string>* warnings) {
  cfg.validate();
  if (pool.empty()) throw ConfigError("relabel: empty backbone pool");
  if (s.size() == 0) throw ConfigError("relabel: distilled set is empty");
  for (const auto* m : pool) {
    if (m->spec().classes != s.classes) {
      throw ConfigError("relabel: backbone " + m->spec().name + " has " + std::to_string(m->spec().classes) +
                        " classes, distilled set has " + std::to_string(s.classes));
    }
  }
  SoftLabelStore store;
  store.images = static_cast<std::uint32_t>(s.size());
  store.classes = static_cast<std::uint32_t>(s.classes);
  store.epochs = static_cast<std::uint32_t>(cfg.epochs);
  store.use_ln = cfg.ensemble.use_ln;
  store.scope = cfg.ensemble.scope;
  store.flip = cfg.flip;
  store.crop_pad = static_cast<std::uint32_t>(cfg.crop_pad);
  store.tau_label = cfg.tau_label;
  store.base_seed = util::derive_seed(cfg.seed, "relabel/views");

  const std::size_t n = s.images.size() / s.size();
  Shape view_shape = s.images.shape();
  for (std::uint32_t e = 0; e < store.epochs; ++e) {
    for (std::size_t b0 = 0; b0 < s.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b1 = std::min(s.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      view_shape[0] = static_cast<std::int64_t>(b1 - b0);
      Array views(view_shape);
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = b0; i < b1; ++i) {
        seeds.push_back(store.view_seed(e, static_cast<std::uint32_t>(i)));
        const Array v = augmented_view(s, i, seeds.back(), cfg.crop_pad, cfg.flip);
        std::copy(v.vec().begin(), v.vec().end(), views.vec().begin() + (i - b0) * n);
      }
      auto res = ensemble_logits(views, pool, cfg.ensemble);
      if (warnings != nullptr) warnings->insert(warnings->end(), res.warnings.begin(), res.warnings.end());
      for (std::size_t i = b0; i < b1; ++i) {
        SoftLabelRecord r;
        r.image = static_cast<std::uint32_t>(i);
        r.seed = seeds[i - b0];
        for (std::uint32_t k = 0; k < store.classes; ++k) {
          r.logits.push_back(static_cast<float>(res.logits[(i - b0) * store.classes + k]));
        }
        if (!std::all_of(r.logits.begin(), r.logits.end(), [](float z) { return std::isfinite(z); })) {
          throw NumericError("relabel: non-finite logits for image " + std::to_string(i));
        }
        store.records.push_back(std::move(r));
      }
    }
  }
  store.sort();
  return store;
}

void save_store(const SoftLabelStore& store, const std::filesystem::path& path) {
  std::vector<unsigned char> out(kMagic, kMagic + 4);
  util::put_u32(out, kVersion);
  util::put_u32(out, store.images);
  util::put_u32(out, store.classes);
  util::put_u32(out, store.epochs);
  util::put_u8(out, store.use_ln ? 1 : 0);
  util::put_u8(out, store.scope == LnScope::kImage ? 1 : 0);
  util::put_u8(out, store.flip ? 1 : 0);
  util::put_u8(out, 0);
  util::put_u32(out, store.crop_pad);
  util::put_f64(out, store.tau_label);
  util::put_u64(out, store.base_seed);
  util::put_u64(out, store.records.size());
  for (const auto& r : store.records) {
    if (r.logits.size() != store.classes) throw ShapeError("save_store: record width differs from class count");
    util::put_u32(out, r.image);
    util::put_u64(out, r.seed);
    for (float z : r.logits) util::put_f32(out, z);
  }
  util::write_file(path, out);
}

SoftLabelStore load_store(const std::filesystem::path& path) {
  const auto bytes = util::read_file(path);
  const std::string name = path.filename().string();
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(name + ": not a soft-label store");
  }
  const unsigned char* p = bytes.data() + 4;
  if (util::get_u32(p) != kVersion) throw FormatError(name + ": unsupported store version");
  SoftLabelStore s;
  s.images = util::get_u32(p + 4);
  s.classes = util::get_u32(p + 8);
  s.epochs = util::get_u32(p + 12);
  s.use_ln = p[16] != 0;
  s.scope = p[17] != 0 ? LnScope::kImage : LnScope::kBatch;
  s.flip = p[18] != 0;
  s.crop_pad = util::get_u32(p + 20);
  s.tau_label = util::get_f64(p + 24);
  s.base_seed = util::get_u64(p + 32);
  const std::uint64_t count = util::get_u64(p + 40);
  const std::size_t stride = 4 + 8 + 4 * static_cast<std::size_t>(s.classes);
  if (s.classes == 0 || bytes.size() != kHeaderBytes + count * stride) {
    throw FormatError(name + ": expected " + std::to_string(kHeaderBytes + count * stride) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  s.records.resize(count);
  const unsigned char* q = bytes.data() + kHeaderBytes;
  for (auto& r : s.records) {
    r.image = util::get_u32(q);
    r.seed = util::get_u64(q + 4);
    r.logits.resize(s.classes);
    for (std::uint32_t k = 0; k < s.classes; ++k) r.logits[k] = util::get_f32(q + 12 + 4 * k);
    if (r.image >= s.images) throw FormatError(name + ": record image index out of range");
    if (!std::all_of(r.logits.begin(), r.logits.end(), [](float z) { return std::isfinite(z); })) {
      throw FormatError(name + ": non-finite logits for image " + std::to_string(r.image));
    }
    q += stride;
  }
  if (!std::is_sorted(s.records.begin(), s.records.end(), [](const SoftLabelRecord& a, const SoftLabelRecord& b) {
        return std::make_pair(a.image, a.seed) < std::make_pair(b.image, b.seed);
      })) {
    throw FormatError(name + ": records out of order");
  }
  if (count != static_cast<std::uint64_t>(s.images) * s.epochs) {
    throw FormatError(name + ": " + std::to_string(count) + " records, expected " + std::to_string(s.images) +
                      " images x " + std::to_string(s.epochs) + " epochs");
  }
  for (std::uint32_t i = 0; i < s.images; ++i) {
    for (std::uint32_t e = 0; e < s.epochs; ++e) {
      if (!s.find(i, s.view_seed(e, i))) {
        throw FormatError(name + ": no record for image " + std::to_string(i) + " epoch " + std::to_string(e));
      }
    }
  }
  return s;
}

}  // namespace gvbsm::relabel
