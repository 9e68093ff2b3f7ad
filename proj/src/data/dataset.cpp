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
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "gvbsm/data/dataset.hpp"
#include "gvbsm/error.hpp"
#include "gvbsm/util/binio.hpp"
#include "gvbsm/util/hash.hpp"

namespace gvbsm::data {

using ad::Array;
using ad::Shape;

std::size_t Dataset::image_numel() const {
  return static_cast<std::size_t>(channels()) * static_cast<std::size_t>(height()) *
         static_cast<std::size_t>(width());
}

Array Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t n = image_numel();
  Array out(Shape{static_cast<std::int64_t>(indices.size()), images.dim(1), images.dim(2), images.dim(3)});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(images.ptr() + indices[i] * n, n, out.ptr() + i * n);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[i]);
  return out;
}

std::vector<std::size_t> Dataset::indices_of_class(int k) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == k) out.push_back(i);
  return out;
}

std::vector<double> Dataset::pad_values() const {
  std::vector<double> v(norm.mean.size());
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = -norm.mean[c] / norm.std[c];
  return v;
}

std::vector<double> Dataset::lower_bounds() const { return pad_values(); }

std::vector<double> Dataset::upper_bounds() const {
  std::vector<double> v(norm.mean.size());
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = (1.0 - norm.mean[c]) / norm.std[c];
  return v;
}

Fingerprint fingerprint(const Dataset& ds) {
  Fingerprint f;
  f.size = ds.size();
  f.classes = ds.classes;
  f.content_hash = util::hash_ints(ds.labels, util::hash_doubles(ds.images.data()));
  return f;
}

std::uint64_t image_hash(const Dataset& ds, std::size_t i) {
  const std::size_t n = ds.image_numel();
  return util::hash_doubles(ds.images.data().subspan(i * n, n));
}

namespace {

// Raw images in [0,1] -> dataset normalised with training statistics.
void normalize(Dataset& train, Dataset& test) {
  const int c = train.channels();
  const std::size_t plane = static_cast<std::size_t>(train.height()) * static_cast<std::size_t>(train.width());
  train.norm.mean.assign(c, 0.0);
  train.norm.std.assign(c, 0.0);
  const double count = static_cast<double>(train.size() * plane);
  for (std::size_t i = 0; i < train.size(); ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double* p = train.images.ptr() + (i * c + ch) * plane;
      for (std::size_t j = 0; j < plane; ++j) train.norm.mean[ch] += p[j];
    }
  for (auto& m : train.norm.mean) m /= count;
  for (std::size_t i = 0; i < train.size(); ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double* p = train.images.ptr() + (i * c + ch) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        train.norm.std[ch] += (p[j] - train.norm.mean[ch]) * (p[j] - train.norm.mean[ch]);
      }
    }
  for (auto& s : train.norm.std) s = std::max(std::sqrt(s / count), 1e-6);
  test.norm = train.norm;
  for (Dataset* ds : {&train, &test}) {
    for (std::size_t i = 0; i < ds->size(); ++i)
      for (int ch = 0; ch < c; ++ch) {
        double* p = ds->images.ptr() + (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) p[j] = (p[j] - ds->norm.mean[ch]) / ds->norm.std[ch];
      }
  }
}

Dataset empty_like(std::string name, int n, int c, int h, int w, int classes, bool flip) {
  Dataset ds;
  ds.name = std::move(name);
  ds.images = Array(Shape{n, c, h, w});
  ds.labels.assign(static_cast<std::size_t>(n), 0);
  ds.classes = classes;
  ds.flip_invariant = flip;
  return ds;
}

// Two isotropic Gaussian blobs on a 1x4x4 grid, class means 8 sigma apart.
Splits make_blobs(const ToyOptions& opt) {
  constexpr int kDim = 16;
  constexpr double kHalfDistance = 4.0;
  std::mt19937_64 rng(util::derive_seed(opt.seed, "blobs-2"));
  std::normal_distribution<double> nd(0.0, 1.0);
  std::array<double, kDim> dir{};
  double nrm = 0.0;
  for (auto& d : dir) {
    d = nd(rng);
    nrm += d * d;
  }
  for (auto& d : dir) d /= std::sqrt(nrm);
  auto fill = [&](Dataset& ds, int per_class) {
    for (int i = 0; i < 2 * per_class; ++i) {
      const int k = i % 2;
      ds.labels[static_cast<std::size_t>(i)] = k;
      const double sign = k == 0 ? -1.0 : 1.0;
      for (int j = 0; j < kDim; ++j) {
        // Raw values are centred on 0.5 so the shared [0,1] convention holds
        // for normalisation bookkeeping.
        ds.images[static_cast<std::size_t>(i) * kDim + j] = 0.5 + 0.05 * (sign * kHalfDistance * dir[j] + nd(rng));
      }
    }
  };
  Splits s{empty_like("blobs-2", 2 * opt.train_per_class, 1, 4, 4, 2, false),
           empty_like("blobs-2", 2 * opt.test_per_class, 1, 4, 4, 2, false)};
  fill(s.train, opt.train_per_class);
  fill(s.test, opt.test_per_class);
  normalize(s.train, s.test);
  return s;
}

struct Pt {
  double x, y;
};

std::vector<Pt> ellipse(double cx, double cy, double rx, double ry, double from = 0.0,
                        double to = 2.0 * std::numbers::pi, int steps = 16) {
  std::vector<Pt> pts;
  for (int i = 0; i <= steps; ++i) {
    const double a = from + (to - from) * i / steps;
    pts.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return pts;
}

// Stroke skeletons of the ten digits in the unit square (y down).
std::vector<std::vector<Pt>> glyph(int digit) {
  switch (digit) {
    case 0: return {ellipse(0.5, 0.5, 0.28, 0.42)};
    case 1: return {{{0.5, 0.08}, {0.5, 0.92}}, {{0.33, 0.25}, {0.5, 0.08}}};
    case 2: return {{{0.22, 0.3}, {0.3, 0.13}, {0.5, 0.08}, {0.7, 0.13}, {0.78, 0.3}, {0.7, 0.48}, {0.22, 0.92}, {0.8, 0.92}}};
    case 3: return {{{0.22, 0.12}, {0.75, 0.12}, {0.45, 0.45}, {0.7, 0.55}, {0.78, 0.72}, {0.65, 0.9}, {0.4, 0.92}, {0.2, 0.82}}};
    case 4: return {{{0.65, 0.92}, {0.65, 0.08}, {0.2, 0.65}, {0.82, 0.65}}};
    case 5: return {{{0.78, 0.1}, {0.28, 0.1}, {0.25, 0.45}, {0.55, 0.4}, {0.75, 0.55}, {0.75, 0.78}, {0.55, 0.92}, {0.22, 0.85}}};
    case 6: return {{{0.7, 0.1}, {0.45, 0.25}, {0.28, 0.5}, {0.27, 0.75}, {0.45, 0.92}, {0.68, 0.85}, {0.74, 0.66}, {0.55, 0.52}, {0.3, 0.6}}};
    case 7: return {{{0.2, 0.1}, {0.8, 0.1}, {0.45, 0.92}}};
    case 8: return {ellipse(0.5, 0.29, 0.22, 0.2), ellipse(0.5, 0.7, 0.26, 0.22)};
    case 9: return {ellipse(0.5, 0.32, 0.24, 0.22), {{0.74, 0.32}, {0.6, 0.92}}};
    default: throw ConfigError("glyph: digit out of range");
  }
}

double segment_distance(Pt p, Pt a, Pt b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = p.x - a.x, wy = p.y - a.y;
  const double len2 = vx * vx + vy * vy;
  const double t = len2 > 0 ? std::clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

void render_digit(int digit, std::mt19937_64& rng, double* out) {
  constexpr int kSize = 16;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double angle = (u(rng) - 0.5) * 0.42;       // about +-12 degrees
  const double scale = 10.5 + 2.5 * u(rng);          // glyph height in pixels
  const double aspect = 0.8 + 0.3 * u(rng);
  const double shear = (u(rng) - 0.5) * 0.3;
  const double cx = 8.0 + (u(rng) - 0.5) * 3.0;
  const double cy = 8.0 + (u(rng) - 0.5) * 3.0;
  const double thick = 1.0 + 1.0 * u(rng);
  const double ink = 0.75 + 0.25 * u(rng);
  const double background = 0.15 * u(rng);
  const double ca = std::cos(angle), sa = std::sin(angle);
  auto place = [&](Pt p) {
    double x = (p.x - 0.5) * scale * aspect;
    double y = (p.y - 0.5) * scale;
    x += shear * y;
    return Pt{cx + ca * x - sa * y, cy + sa * x + ca * y};
  };
  std::vector<std::vector<Pt>> strokes = glyph(digit);
  for (auto& s : strokes)
    for (auto& p : s) p = place(p);
  std::normal_distribution<double> noise(0.0, 0.12);
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x) {
      const Pt c{x + 0.5, y + 0.5};
      double d = 1e9;
      for (const auto& s : strokes)
        for (std::size_t i = 0; i + 1 < s.size(); ++i) d = std::min(d, segment_distance(c, s[i], s[i + 1]));
      const double cover = std::clamp(thick / 2.0 + 0.5 - d, 0.0, 1.0);
      out[y * kSize + x] = std::clamp(background + ink * cover + noise(rng), 0.0, 1.0);
    }
}

Splits make_digits(const ToyOptions& opt) {
  auto build = [&](int per_class, std::string_view tag) {
    Dataset ds = empty_like("digits-16", 10 * per_class, 1, 16, 16, 10, false);
    std::mt19937_64 rng(util::derive_seed(opt.seed, tag));
    for (int i = 0; i < 10 * per_class; ++i) {
      const int k = i % 10;
      ds.labels[static_cast<std::size_t>(i)] = k;
      render_digit(k, rng, ds.images.ptr() + static_cast<std::size_t>(i) * 256);
    }
    return ds;
  };
  Splits s{build(opt.train_per_class, "digits-16/train"), build(opt.test_per_class, "digits-16/test")};
  normalize(s.train, s.test);
  return s;
}

constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

struct CifarRaw {
  std::vector<int> labels;
  std::vector<std::array<double, 3 * 16 * 16>> images;  // 2x2 box-downscaled, [0,1]
};

CifarRaw read_cifar(const std::string& path) {
  const auto bytes = util::read_file(path);
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    throw FormatError(path + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                      std::to_string(kCifarRecord) + "-byte record; malformed at offset " +
                      std::to_string(bytes.size() - bytes.size() % kCifarRecord));
  }
  CifarRaw raw;
  for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
    const int label = bytes[off];
    if (label > 9) {
      throw FormatError(path + ": invalid label " + std::to_string(label) + " at offset " + std::to_string(off));
    }
    raw.labels.push_back(label);
    std::array<double, 3 * 16 * 16> img{};
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          double s = 0.0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) s += bytes[off + 1 + c * 1024 + (2 * y + dy) * 32 + 2 * x + dx];
          img[static_cast<std::size_t>((c * 16 + y) * 16 + x)] = s / (4.0 * 255.0);
        }
    raw.images.push_back(img);
  }
  return raw;
}

Splits make_cifar_subset(const ToyOptions& opt) {
  if (opt.path.empty()) throw ConfigError("cifar-subset requires dataset.path (CIFAR-10 binary batch)");
  const CifarRaw train_raw = read_cifar(opt.path);
  const CifarRaw test_raw = opt.test_path.empty() ? CifarRaw{} : read_cifar(opt.test_path);
  auto take = [&](const CifarRaw& raw, int skip, int per_class) {
    std::vector<std::size_t> picked;
    std::array<int, 10> seen{};
    for (std::size_t i = 0; i < raw.labels.size(); ++i) {
      const int k = raw.labels[i];
      if (seen[k] >= skip && seen[k] < skip + per_class) picked.push_back(i);
      ++seen[k];
    }
    for (int k = 0; k < 10; ++k) {
      if (seen[k] < skip + per_class) {
        throw FormatError("cifar-subset: class " + std::to_string(k) + " has only " + std::to_string(seen[k]) +
                          " images, need " + std::to_string(skip + per_class));
      }
    }
    Dataset ds = empty_like("cifar-subset", static_cast<int>(picked.size()), 3, 16, 16, 10, true);
    for (std::size_t i = 0; i < picked.size(); ++i) {
      ds.labels[i] = raw.labels[picked[i]];
      std::copy(raw.images[picked[i]].begin(), raw.images[picked[i]].end(), ds.images.ptr() + i * 768);
    }
    return ds;
  };
  Splits s{take(train_raw, 0, opt.train_per_class),
           opt.test_path.empty() ? take(train_raw, opt.train_per_class, opt.test_per_class)
                                 : take(test_raw, 0, opt.test_per_class)};
  normalize(s.train, s.test);
  return s;
}

}  // namespace

std::vector<std::string> dataset_names() { return {"blobs-2", "digits-16", "cifar-subset"}; }

Splits make_dataset(const ToyOptions& opt) {
  if (opt.train_per_class < 1 || opt.test_per_class < 1) {
    throw ConfigError("dataset: per-class counts must be >= 1");
  }
  if (opt.name == "blobs-2") return make_blobs(opt);
  if (opt.name == "digits-16") return make_digits(opt);
  if (opt.name == "cifar-subset") return make_cifar_subset(opt);
  throw ConfigError("unknown dataset '" + opt.name + "' (expected blobs-2, digits-16 or cifar-subset)");
}

AugmentParams draw_augment(std::mt19937_64& rng, int pad, bool allow_flip) {
  AugmentParams p;
  if (pad > 0) {
    std::uniform_int_distribution<int> shift(-pad, pad);
    p.dx = shift(rng);
    p.dy = shift(rng);
  }
  if (allow_flip) p.flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  return p;
}

AugmentParams augment_for_seed(std::uint64_t seed, int pad, bool allow_flip) {
  std::mt19937_64 rng(seed);
  return draw_augment(rng, pad, allow_flip);
}

void apply_augment(const AugmentParams& p, std::span<const double> src, std::span<double> dst, int c, int h,
                   int w, std::span<const double> fill) {
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sx0 = p.flip ? (w - 1 - x) : x;
        const int sy = y + p.dy;
        const int sx = sx0 + p.dx;
        const std::size_t o = static_cast<std::size_t>((ch * h + y) * w + x);
        if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
          dst[o] = fill[static_cast<std::size_t>(ch)];
        } else {
          dst[o] = src[static_cast<std::size_t>((ch * h + sy) * w + sx)];
        }
      }
}

}  // namespace gvbsm::data
