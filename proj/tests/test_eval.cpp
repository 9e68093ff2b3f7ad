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
#include <random>

#include "fd_oracle.hpp"
#include "gvbsm/error.hpp"
#include "gvbsm/eval/evaluator.hpp"
#include "moment_oracle.hpp"

using namespace gvbsm;
using namespace gvbsm::testing;

namespace {

double kd_value(const Array& s, const Array& z, const std::vector<int>& y, double gamma) {
  Tape t;
  return eval::kd_eval_loss(t.constant(s), z, y, gamma).value().item();
}

struct Fixture {
  data::Splits data;
  synth::SyntheticDataset syn;
  std::unique_ptr<zoo::Model> teacher;
  relabel::SoftLabelStore store;
};

Fixture blobs_fixture(std::uint64_t seed, int epochs) {
  data::ToyOptions opt;
  opt.name = "blobs-2";
  opt.seed = seed;
  opt.train_per_class = 60;
  opt.test_per_class = 40;
  Fixture f{data::make_dataset(opt), {}, nullptr, {}};
  f.teacher = std::make_unique<zoo::Model>(zoo::builtin_spec("tiny-resnet", 1, 4, 4, 2), seed);
  zoo::PretrainConfig pc;
  pc.seed = seed;
  pc.crop_pad = 0;
  zoo::pretrain(*f.teacher, f.data.train, pc);
  f.syn = synth::init_synthetic(f.data.train, 5, synth::InitMode::kRealInit, seed);
  relabel::RelabelConfig rc;
  rc.epochs = epochs;
  rc.seed = seed;
  rc.crop_pad = 0;
  rc.flip = false;
  f.store = relabel::relabel_dataset(f.syn, {f.teacher.get()}, rc);
  return f;
}

}  // namespace

TEST_CASE("kd_eval_loss: exact match and pure squared error") {
  const Array s = random_array(Shape{3, 4}, 1);
  const std::vector<int> y{0, 3, 2};
  CHECK(kd_value(s, s, y, 0.0) == 0.0);
  const Array z = random_array(Shape{3, 4}, 2);
  double sq = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) sq += (s[i] - z[i]) * (s[i] - z[i]);
  CHECK(kd_value(s, z, y, 0.0) == doctest::Approx(sq / 3.0).epsilon(1e-14));
  CHECK(kd_value(s, z, y, 0.0) > 0.0);
}

TEST_CASE("kd_eval_loss: hand-computed GT term") {
  const Array s(Shape{1, 2}, std::vector<double>{1.0, 0.0});
  const double sigma0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  const double want = 0.1 * -std::log(sigma0);
  CHECK(kd_value(s, s, {0}, 0.1) == doctest::Approx(want).epsilon(1e-14));
  CHECK(want == doctest::Approx(0.1 * 0.3133).epsilon(1e-3));
}

TEST_CASE("kd_eval_loss: GT term ignores a logit shift") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Array s = random_array(Shape{4, 6}, 100 + trial, -3, 3);
    const std::vector<int> y{1, 5, 0, 2};
    Array shifted = s;
    for (int b = 0; b < 4; ++b) {
      const double c = u(rng);
      for (int k = 0; k < 6; ++k) shifted[b * 6 + k] += c;
    }
    const double a = kd_value(s, s, y, 0.3);
    const double b = kd_value(shifted, shifted, y, 0.3);
    CHECK(std::abs(a - b) <= 1e-9);
  }
}

TEST_CASE("kd_eval_loss: rejections") {
  const Array s = random_array(Shape{2, 3}, 1);
  CHECK_THROWS_AS(kd_value(s, s, {0, 1}, -0.1), ConfigError);
  CHECK_THROWS_AS(kd_value(s, random_array(Shape{2, 4}, 1), {0, 1}, 0.1), ShapeError);
  CHECK_THROWS_AS(kd_value(s, s, {0}, 0.1), ShapeError);
  Array bad = s;
  bad[2] = std::nan("");
  CHECK_THROWS_AS(kd_value(bad, s, {0, 1}, 0.1), NumericError);
}

TEST_CASE("tempered KL approaches the squared-error limit") {
  for (int trial = 0; trial < 100; ++trial) {
    const Array p = random_array(Shape{10}, 300 + trial, -3, 3);
    const Array q = random_array(Shape{10}, 700 + trial, -3, 3);
    const double kl = eval::tempered_kl(p.vec(), q.vec(), 1e3);
    const double lim = kl_limit(p.vec(), q.vec());
    CHECK(std::abs(kl - lim) <= 0.01 * lim);
  }
  const std::vector<double> a{1.0, 2.0}, b{1.0, 2.0};
  CHECK(eval::tempered_kl(a, b, 3.0) == 0.0);
}

TEST_CASE("diversity metric") {
  const Array one = random_array(Shape{1, 1, 3, 3}, 4, 0.1, 1.0);
  Array same(Shape{3, 1, 3, 3});
  for (int i = 0; i < 3; ++i) std::copy(one.vec().begin(), one.vec().end(), same.vec().begin() + i * 9);
  auto r = eval::diversity_metric(same, std::vector<int>{2, 2, 2});
  CHECK(r.mean_cosine == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.class_min_eigen[0] <= 1e-9);

  Array ortho(Shape{3, 1, 2, 2}, 0.0);
  ortho[0] = 1.0;
  ortho[5] = 2.0;
  ortho[10] = -3.0;
  r = eval::diversity_metric(ortho, std::vector<int>{0, 0, 0});
  CHECK(std::abs(r.mean_cosine) <= 1e-15);
  CHECK(r.class_min_eigen[0] == doctest::Approx(1.0).epsilon(1e-9));

  // Brute force on a random 4-image class plus a second class.
  const Array x = random_array(Shape{7, 1, 3, 3}, 8);
  const std::vector<int> labels{0, 1, 0, 1, 0, 0, 1};
  r = eval::diversity_metric(x, labels);
  REQUIRE(r.classes == std::vector<int>{0, 1});
  for (std::size_t ci = 0; ci < 2; ++ci) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == r.classes[ci]) idx.push_back(i);
    double acc = 0.0;
    int pairs = 0;
    for (std::size_t a : idx)
      for (std::size_t b : idx) {
        if (b <= a) continue;
        double ab = 0, aa = 0, bb = 0;
        for (int q = 0; q < 9; ++q) {
          ab += x[a * 9 + q] * x[b * 9 + q];
          aa += x[a * 9 + q] * x[a * 9 + q];
          bb += x[b * 9 + q] * x[b * 9 + q];
        }
        acc += ab / std::sqrt(aa * bb);
        ++pairs;
      }
    CHECK(r.class_cosine[ci] == doctest::Approx(acc / pairs).epsilon(1e-12));
  }
  CHECK(r.mean_cosine == doctest::Approx(0.5 * (r.class_cosine[0] + r.class_cosine[1])).epsilon(1e-12));
  CHECK_THROWS_AS(eval::diversity_metric(x, std::vector<int>{0, 1, 2, 3, 4, 5, 6}), ConfigError);
}

TEST_CASE("eval config defaults") {
  eval::EvalConfig cfg;
  CHECK(cfg.gamma == 0.1);
  CHECK(cfg.lr == 0.001);
  CHECK(cfg.beta1 == 0.9);
  CHECK(cfg.beta2 == 0.999);
  CHECK(cfg.epochs <= 200);
  CHECK(eval::eval_batch_size(cfg, 100) == 100);
  CHECK(eval::eval_batch_size(cfg, 101) == 64);
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("training on distilled blobs is deterministic and learns") {
  auto f = blobs_fixture(3, 30);
  eval::EvalConfig cfg;
  cfg.model = "tiny-resnet";
  cfg.epochs = 30;
  cfg.lr = 0.01;
  cfg.seed = 4;
  const auto a = eval::train_eval_model(f.syn, f.store, f.data.test, cfg);
  const auto b = eval::train_eval_model(f.syn, f.store, f.data.test, cfg);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.loss_curve == b.loss_curve);
  CHECK(a.accuracy >= 0.0);
  CHECK(a.accuracy <= 1.0);
  CHECK(a.accuracy >= 0.9);
  CHECK(a.loss_curve.size() == 30);
  CHECK(a.loss_curve.back() < a.loss_curve.front());

  const auto dir = std::filesystem::temp_directory_path() / "gvbsm_test_eval";
  std::filesystem::remove_all(dir);
  eval::write_report(a, dir);
  CHECK(std::filesystem::exists(dir / "loss.csv"));
  const auto back = eval::read_report(dir);
  CHECK(back.accuracy == a.accuracy);
  CHECK(back.loss_curve == a.loss_curve);
  CHECK(back.config_json == a.config_json);
  std::filesystem::remove_all(dir);
}

TEST_CASE("missing soft labels abort naming the key") {
  auto f = blobs_fixture(5, 2);
  eval::EvalConfig cfg;
  cfg.model = "tiny-resnet";
  cfg.epochs = 3;
  CHECK_THROWS_AS(eval::train_eval_model(f.syn, f.store, f.data.test, cfg), MissingArtifactError);
  cfg.epochs = 2;
  auto holed = f.store;
  const auto key = holed.view_seed(1, 4);
  holed.records.erase(std::remove_if(holed.records.begin(), holed.records.end(),
                                     [&](const auto& r) { return r.image == 4 && r.seed == key; }),
                      holed.records.end());
  try {
    eval::train_eval_model(f.syn, holed, f.data.test, cfg);
    FAIL("expected MissingArtifactError");
  } catch (const MissingArtifactError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("image 4") != std::string::npos);
    CHECK(msg.find(std::to_string(key)) != std::string::npos);
  }
  synth::SyntheticDataset empty = f.syn;
  empty.labels.clear();
  CHECK_THROWS_AS(eval::train_eval_model(empty, f.store, f.data.test, cfg), ConfigError);
}
