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
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gvbsm/ad/array.hpp"

namespace gvbsm::data {

struct Normalization {
  std::vector<double> mean;  // per channel, raw pixel units
  std::vector<double> std;

  bool operator==(const Normalization&) const = default;
};

/// Labelled image set, stored normalised as [N,C,H,W].
struct Dataset {
  std::string name;
  ad::Array images;
  std::vector<int> labels;
  int classes = 0;
  Normalization norm;
  // Whether horizontal flips preserve class identity (false for glyphs).
  bool flip_invariant = true;

  std::size_t size() const { return labels.size(); }
  int channels() const { return static_cast<int>(images.dim(1)); }
  int height() const { return static_cast<int>(images.dim(2)); }
  int width() const { return static_cast<int>(images.dim(3)); }
  std::size_t image_numel() const;

  ad::Array gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> indices_of_class(int k) const;

  /// Normalised value of a raw zero pixel, used as crop padding.
  std::vector<double> pad_values() const;
  /// Normalised bounds of the raw [0,1] pixel range, per channel.
  std::vector<double> lower_bounds() const;
  std::vector<double> upper_bounds() const;
};

struct Splits {
  Dataset train;
  Dataset test;
};

struct Fingerprint {
  std::uint64_t size = 0;
  int classes = 0;
  std::uint64_t content_hash = 0;
  bool operator==(const Fingerprint&) const = default;
};

Fingerprint fingerprint(const Dataset& ds);
std::uint64_t image_hash(const Dataset& ds, std::size_t i);

struct ToyOptions {
  std::string name = "digits-16";
  std::uint64_t seed = 0;
  int train_per_class = 200;
  int test_per_class = 50;
  // cifar-subset: CIFAR-10 binary batch file(s). When test_path is empty the
  // test split is carved from `path` after the training images.
  std::string path;
  std::string test_path;
};

/// Built-in datasets: blobs-2, digits-16, cifar-subset. Unknown names throw
/// ConfigError; malformed external data throws FormatError with the offset.
Splits make_dataset(const ToyOptions& opt);
std::vector<std::string> dataset_names();

// Crop-with-padding plus optional horizontal flip.
struct AugmentParams {
  int dx = 0;
  int dy = 0;
  bool flip = false;
  bool operator==(const AugmentParams&) const = default;
};

AugmentParams draw_augment(std::mt19937_64& rng, int pad, bool allow_flip);
AugmentParams augment_for_seed(std::uint64_t seed, int pad, bool allow_flip);
void apply_augment(const AugmentParams& p, std::span<const double> src, std::span<double> dst, int c, int h,
                   int w, std::span<const double> fill);

}  // namespace gvbsm::data
