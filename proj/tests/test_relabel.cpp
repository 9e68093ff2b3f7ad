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
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>

#include "fd_oracle.hpp"
#include "gvbsm/error.hpp"
#include "gvbsm/relabel/relabeler.hpp"

using namespace gvbsm;
using namespace gvbsm::testing;

namespace {

zoo::Model small_model(const std::string& name, std::uint64_t seed, int classes = 3) {
  return zoo::Model(zoo::builtin_spec(name, 1, 6, 6, classes), seed);
}

double row_norm(const Array& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

// Sets the final linear layer so that the model's logits are scaled by s.
void scale_head(zoo::Model& m, double s) {
  for (auto& p : m.params())
    if (p.path.rfind("fc.", 0) == 0)
      for (auto& v : p.value.vec()) v *= s;
}

synth::SyntheticDataset toy_synthetic(std::uint64_t seed, int ipc = 2, int classes = 3) {
  synth::SyntheticDataset s;
  s.ipc = ipc;
  s.classes = classes;
  s.images = random_array(Shape{ipc * classes, 1, 6, 6}, seed);
  for (int k = 0; k < classes; ++k)
    for (int i = 0; i < ipc; ++i) s.labels.push_back(k);
  s.norm = {{0.5}, {0.25}};
  s.lower = {-2.0};
  s.upper = {2.0};
  return s;
}

}  // namespace

TEST_CASE("identical pool members reproduce the single model") {
  const auto m = small_model("tiny-resnet", 3);
  const Array x = random_array(Shape{5, 1, 6, 6}, 1);
  const Array single = m.predict(x);
  for (bool ln : {false, true}) {
    for (auto scope : {relabel::LnScope::kBatch, relabel::LnScope::kImage}) {
      const auto r = relabel::ensemble_logits(x, {&m, &m, &m}, {ln, scope});
      CHECK(max_abs_diff(r.logits, single) <= 1e-12);
    }
  }
}

TEST_CASE("LN on a doubled member gives 1.5 z") {
  auto a = small_model("tiny-convnet-gn", 4);
  auto b = small_model("tiny-convnet-gn", 4);
  scale_head(b, 2.0);
  const Array x = random_array(Shape{4, 1, 6, 6}, 2);
  const Array z1 = a.predict(x);
  const Array z2 = b.predict(x);
  for (std::size_t i = 0; i < z1.size(); ++i) REQUIRE(z2[i] == doctest::Approx(2.0 * z1[i]).epsilon(1e-12));
  const auto r = relabel::ensemble_logits(x, {&a, &b}, {true, relabel::LnScope::kBatch});
  Array want = z1;
  for (auto& v : want.vec()) v *= 1.5;
  CHECK(max_abs_diff(r.logits, want) <= 1e-12);
  // Without LN the plain mean is also 1.5 z here; with a 3x member it differs.
  scale_head(b, 1.5);
  const Array z3 = b.predict(x);
  const auto plain = relabel::ensemble_logits(x, {&a, &b}, {false, relabel::LnScope::kBatch});
  const auto ln = relabel::ensemble_logits(x, {&a, &b}, {true, relabel::LnScope::kBatch});
  Array mean(z1.shape()), two(z1.shape());
  for (std::size_t i = 0; i < z1.size(); ++i) {
    mean[i] = 0.5 * (z1[i] + z3[i]);
    two[i] = 2.0 * z1[i];
  }
  CHECK(max_abs_diff(plain.logits, mean) <= 1e-12);
  CHECK(max_abs_diff(ln.logits, two) <= 1e-12);
}

TEST_CASE("LN equalises member norms and cancels member scale") {
  const auto a = small_model("tiny-resnet", 5);
  const auto b = small_model("tiny-mobile", 6);
  auto c = small_model("tiny-shuffle", 7);
  const Array x = random_array(Shape{6, 1, 6, 6}, 3);
  const auto base = relabel::ensemble_logits(x, {&a, &b, &c}, {true, relabel::LnScope::kBatch});
  // Rescaled members all have the mean norm.
  const double target = (row_norm(a.predict(x)) + row_norm(b.predict(x)) + row_norm(c.predict(x))) / 3.0;
  for (const auto* m : {&a, &b, static_cast<const zoo::Model*>(&c)}) {
    Array z = m->predict(x);
    const double s = target / row_norm(z);
    for (auto& v : z.vec()) v *= s;
    CHECK(std::abs(row_norm(z) - target) <= 1e-9);
  }
  // Scaling one member's logits leaves the direction of the ensemble unchanged
  // up to the change in mean norm.
  scale_head(c, 3.0);
  const auto scaled = relabel::ensemble_logits(x, {&a, &b, &c}, {true, relabel::LnScope::kBatch});
  const double ratio = row_norm(scaled.logits) / row_norm(base.logits);
  Array rescaled = base.logits;
  for (auto& v : rescaled.vec()) v *= ratio;
  CHECK(max_abs_diff(scaled.logits, rescaled) <= 1e-9 * std::max(1.0, row_norm(scaled.logits)));
}

TEST_CASE("LN keeps each member's argmax") {
  const auto m = small_model("tiny-resnet", 8, 5);
  const Array x = random_array(Shape{8, 1, 6, 6}, 4);
  const Array z = m.predict(x);
  for (double s : {0.1, 0.7, 3.0, 40.0}) {
    for (int b = 0; b < 8; ++b) {
      int i0 = 0, i1 = 0;
      for (int k = 1; k < 5; ++k) {
        if (z[b * 5 + k] > z[b * 5 + i0]) i0 = k;
        if (s * z[b * 5 + k] > s * z[b * 5 + i1]) i1 = k;
      }
      CHECK(i0 == i1);
    }
  }
}

TEST_CASE("zero-norm member is excluded with a warning") {
  const auto a = small_model("tiny-resnet", 9);
  auto z = small_model("tiny-convnet-gn", 9);
  scale_head(z, 0.0);
  const Array x = random_array(Shape{3, 1, 6, 6}, 5);
  REQUIRE(row_norm(z.predict(x)) == 0.0);
  const auto r = relabel::ensemble_logits(x, {&a, &z}, {true, relabel::LnScope::kBatch});
  CHECK(r.excluded == std::vector<std::size_t>{1});
  CHECK(r.warnings.size() == 1);
  CHECK(max_abs_diff(r.logits, a.predict(x)) <= 1e-12);
  CHECK_THROWS_AS(relabel::ensemble_logits(x, {&z}, {true, relabel::LnScope::kBatch}), NumericError);
  CHECK_THROWS_AS(relabel::ensemble_logits(x, {}, {}), ConfigError);
  const auto other = small_model("tiny-resnet", 1, 4);
  CHECK_THROWS_AS(relabel::ensemble_logits(x, {&a, &other}, {}), ConfigError);
}

TEST_CASE("per-image scope normalises each row") {
  const auto a = small_model("tiny-resnet", 10);
  auto b = small_model("tiny-mobile", 11);
  const Array x = random_array(Shape{4, 1, 6, 6}, 6);
  const Array za = a.predict(x), zb = b.predict(x);
  const auto r = relabel::ensemble_logits(x, {&a, &b}, {true, relabel::LnScope::kImage});
  for (int i = 0; i < 4; ++i) {
    double na = 0, nb = 0;
    for (int k = 0; k < 3; ++k) {
      na += za[i * 3 + k] * za[i * 3 + k];
      nb += zb[i * 3 + k] * zb[i * 3 + k];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    const double t = 0.5 * (na + nb);
    for (int k = 0; k < 3; ++k) {
      const double want = 0.5 * (t / na * za[i * 3 + k] + t / nb * zb[i * 3 + k]);
      CHECK(std::abs(r.logits[i * 3 + k] - want) <= 1e-12);
    }
  }
}

TEST_CASE("identity views reproduce raw-image ensemble logits") {
  const auto a = small_model("tiny-resnet", 12);
  const auto b = small_model("tiny-convnet-gn", 13);
  const auto s = toy_synthetic(7);
  relabel::RelabelConfig cfg;
  cfg.crop_pad = 0;
  cfg.flip = false;
  cfg.seed = 3;
  const auto store = relabel::relabel_dataset(s, {&a, &b}, cfg);
  REQUIRE(store.records.size() == s.size());
  const auto direct = relabel::ensemble_logits(s.images, {&a, &b}, cfg.ensemble);
  for (std::uint32_t i = 0; i < s.size(); ++i) {
    const auto* r = store.find(i, store.view_seed(0, i));
    REQUIRE(r != nullptr);
    for (std::size_t k = 0; k < 3; ++k) CHECK(r->logits[k] == static_cast<float>(direct.logits[i * 3 + k]));
  }
}

TEST_CASE("relabel is deterministic and covers every image per epoch") {
  const auto a = small_model("tiny-resnet", 14);
  const auto s = toy_synthetic(8, 3);
  relabel::RelabelConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 11;
  cfg.batch_size = 4;
  const auto x = relabel::relabel_dataset(s, {&a}, cfg);
  const auto y = relabel::relabel_dataset(s, {&a}, cfg);
  CHECK(x == y);
  CHECK(x.records.size() == 4 * s.size());
  for (std::uint32_t e = 0; e < 4; ++e)
    for (std::uint32_t i = 0; i < s.size(); ++i) CHECK(x.find(i, x.view_seed(e, i)) != nullptr);
  cfg.seed = 12;
  CHECK_FALSE(relabel::relabel_dataset(s, {&a}, cfg) == x);
  // Views differ across epochs once augmentation is on.
  int differing = 0;
  for (std::uint32_t i = 0; i < s.size(); ++i) {
    differing += x.find(i, x.view_seed(0, i))->logits != x.find(i, x.view_seed(1, i))->logits ? 1 : 0;
  }
  CHECK(differing > 0);
}

TEST_CASE("softmax views sum to one") {
  const auto a = small_model("tiny-mobile", 15);
  const auto store = relabel::relabel_dataset(toy_synthetic(9), {&a}, {});
  for (double tau : {0.05, 0.5, 1.0, 4.0, 100.0}) {
    for (const auto& r : store.records) {
      const auto p = relabel::probabilities(r, tau);
      double sum = 0.0;
      for (double v : p) sum += v;
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
  }
  CHECK_THROWS_AS(relabel::probabilities(store.records[0], 0.0), ConfigError);
}

TEST_CASE("relabel rejects bad inputs") {
  const auto a = small_model("tiny-resnet", 16, 4);
  const auto s = toy_synthetic(1);
  CHECK_THROWS_AS(relabel::relabel_dataset(s, {&a}, {}), ConfigError);
  CHECK_THROWS_AS(relabel::relabel_dataset(s, {}, {}), ConfigError);
  relabel::RelabelConfig cfg;
  cfg.epochs = 0;
  const auto b = small_model("tiny-resnet", 16);
  CHECK_THROWS_AS(relabel::relabel_dataset(s, {&b}, cfg), ConfigError);
}

TEST_CASE("store round trip and corruption") {
  const auto a = small_model("tiny-resnet", 17);
  relabel::RelabelConfig cfg;
  cfg.epochs = 2;
  cfg.ensemble.scope = relabel::LnScope::kImage;
  cfg.tau_label = 2.5;
  const auto store = relabel::relabel_dataset(toy_synthetic(2), {&a}, cfg);
  const auto dir = std::filesystem::temp_directory_path() / "gvbsm_test_relabel";
  std::filesystem::remove_all(dir);
  const auto path = dir / "labels.gvsl";
  relabel::save_store(store, path);
  const auto back = relabel::load_store(path);
  CHECK(back == store);
  CHECK(back.scope == relabel::LnScope::kImage);
  CHECK(back.tau_label == 2.5);
  CHECK(std::filesystem::file_size(path) == 52 + store.records.size() * (12 + 4 * 3));

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(relabel::load_store(path), FormatError);
  relabel::save_store(store, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS_AS(relabel::load_store(path), FormatError);
  auto partial = store;
  partial.records.erase(partial.records.begin(), partial.records.begin() + 2);
  relabel::save_store(partial, path);
  CHECK_THROWS_AS(relabel::load_store(path), FormatError);
  auto one_short = store;
  one_short.records.pop_back();
  relabel::save_store(one_short, path);
  CHECK_THROWS_AS(relabel::load_store(path), FormatError);
  CHECK_THROWS_AS(relabel::load_store(dir / "absent.gvsl"), MissingArtifactError);
  std::filesystem::remove_all(dir);
}
