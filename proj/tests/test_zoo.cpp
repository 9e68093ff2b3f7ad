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

#include "gvbsm/error.hpp"
#include "gvbsm/zoo/backbone.hpp"

using namespace gvbsm;
using ad::Array;
using ad::Shape;

namespace {

data::Splits blobs(std::uint64_t seed) {
  data::ToyOptions opt;
  opt.name = "blobs-2";
  opt.seed = seed;
  opt.train_per_class = 100;
  opt.test_per_class = 20;
  return data::make_dataset(opt);
}

// Plain logistic regression by full-batch gradient descent.
double logistic_oracle_accuracy(const data::Dataset& ds) {
  const std::size_t d = ds.image_numel();
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      double z = b;
      for (std::size_t j = 0; j < d; ++j) z += w[j] * ds.images[i * d + j];
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double e = p - ds.labels[i];
      for (std::size_t j = 0; j < d; ++j) gw[j] += e * ds.images[i * d + j];
      gb += e;
    }
    for (std::size_t j = 0; j < d; ++j) w[j] -= 0.1 * gw[j] / static_cast<double>(ds.size());
    b -= 0.1 * gb / static_cast<double>(ds.size());
  }
  std::size_t ok = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double z = b;
    for (std::size_t j = 0; j < d; ++j) z += w[j] * ds.images[i * d + j];
    ok += static_cast<std::size_t>((z > 0) == (ds.labels[i] == 1));
  }
  return static_cast<double>(ok) / static_cast<double>(ds.size());
}

Array ramp(Shape s, double phase = 0.0) {
  Array a(std::move(s));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::sin(0.37 * static_cast<double>(i) + phase);
  return a;
}

}  // namespace

TEST_CASE("same spec and seed give bitwise-identical parameters") {
  for (const auto& name : zoo::builtin_names()) {
    const auto spec = zoo::builtin_spec(name, 3, 16, 16, 10);
    zoo::Model a(spec, 42), b(spec, 42), c(spec, 43);
    REQUIRE(a.params().size() == b.params().size());
    bool differs = false;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
      CHECK(a.params()[i].value == b.params()[i].value);
      differs = differs || !(a.params()[i].value == c.params()[i].value);
    }
    CHECK(differs);
  }
}

TEST_CASE("shape contract and structure") {
  const auto spec = zoo::builtin_spec("tiny-resnet", 3, 16, 16, 10);
  zoo::Model m(spec, 1);
  ad::Tape t;
  auto r = m.forward(t, t.constant(ramp(Shape{5, 3, 16, 16})));
  CHECK(r.logits.shape() == Shape{5, 10});

  zoo::Model gn(zoo::builtin_spec("tiny-convnet-gn", 3, 16, 16, 10), 1);
  ad::Tape t2;
  auto r2 = gn.forward(t2, t2.constant(ramp(Shape{2, 3, 16, 16})));
  CHECK(r2.bn_taps.empty());
  CHECK(r2.conv_taps.size() >= 3);

  for (const auto& name : zoo::builtin_names()) {
    zoo::Model mm(zoo::builtin_spec(name, 1, 16, 16, 10), 3);
    ad::Tape tt;
    auto rr = mm.forward(tt, tt.constant(ramp(Shape{2, 1, 16, 16})));
    CHECK(static_cast<int>(rr.conv_taps.size()) == mm.conv_count());
    CHECK(static_cast<int>(rr.bn_taps.size()) == mm.bn_count());
    CHECK(mm.parameter_count() < 200000);
    zoo::Model big(zoo::builtin_spec(name, 3, 16, 16, 10), 3);
    CHECK(big.parameter_count() < 200000);
    for (std::size_t i = 1; i < rr.conv_taps.size(); ++i) CHECK(rr.conv_taps[i].layer > rr.conv_taps[i - 1].layer);
  }
}

TEST_CASE("zero input through a bias-free conv tap is zero") {
  zoo::Model m(zoo::builtin_spec("tiny-resnet", 1, 16, 16, 10), 5);
  ad::Tape t;
  auto r = m.forward(t, t.constant(Array(Shape{2, 1, 16, 16}, 0.0)));
  REQUIRE_FALSE(m.spec().layers[static_cast<std::size_t>(r.conv_taps[0].layer)].bias);
  for (double v : r.conv_taps[0].output.value().data()) CHECK(v == 0.0);
}

TEST_CASE("BN tap mean equals the per-channel mean of its input") {
  zoo::Model m(zoo::builtin_spec("tiny-resnet", 1, 16, 16, 10), 5);
  ad::Tape t;
  auto r = m.forward(t, t.constant(ramp(Shape{3, 1, 16, 16})), {zoo::Mode::kTrain, false});
  // The stem BN consumes the stem conv output directly.
  REQUIRE(r.bn_taps[0].layer == r.conv_taps[0].layer + 1);
  const Array& pre = r.conv_taps[0].output.value();
  const auto c = static_cast<std::size_t>(pre.dim(1));
  const std::size_t hw = static_cast<std::size_t>(pre.dim(2) * pre.dim(3));
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < hw; ++i) s += pre[(b * c + ch) * hw + i];
    const double mean = s / static_cast<double>(3 * hw);
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < hw; ++i) s2 += std::pow(pre[(b * c + ch) * hw + i] - mean, 2);
    CHECK(r.bn_taps[0].mean.value()[ch] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(r.bn_taps[0].var.value()[ch] == doctest::Approx(s2 / static_cast<double>(3 * hw)).epsilon(1e-12));
  }
}

TEST_CASE("input shape mismatch is rejected") {
  zoo::Model m(zoo::builtin_spec("tiny-resnet", 1, 16, 16, 10), 5);
  ad::Tape t;
  CHECK_THROWS_AS(m.forward(t, t.constant(Array(Shape{2, 3, 16, 16}))), ShapeError);
}

TEST_CASE("unknown layer kind is rejected") {
  auto text = zoo::spec_to_json(zoo::builtin_spec("tiny-mobile", 1, 16, 16, 10));
  const auto pos = text.find("\"relu\"");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 6, "\"gelu\"");
  CHECK_THROWS_AS(zoo::spec_from_json(text), ConfigError);
  CHECK_THROWS_AS(zoo::builtin_spec("resnet50", 1, 16, 16, 10), ConfigError);
}

TEST_CASE("pretrain on separable blobs") {
  auto s = blobs(7);
  const double oracle = logistic_oracle_accuracy(s.train);
  CHECK(oracle >= 0.99);
  zoo::Model m(zoo::builtin_spec("tiny-resnet", 1, 4, 4, 2), 9);
  zoo::PretrainConfig cfg;
  CHECK(cfg.epochs == 5);
  cfg.seed = 3;
  cfg.crop_pad = 0;
  const auto res = zoo::pretrain(m, s.train, cfg);
  CHECK(res.train_accuracy >= 0.95);
  CHECK(res.epoch_loss.size() == 5);
  CHECK(m.epochs_trained == 5);
}

TEST_CASE("epochs = 0 is rejected") {
  auto s = blobs(1);
  zoo::Model m(zoo::builtin_spec("tiny-resnet", 1, 4, 4, 2), 9);
  zoo::PretrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(zoo::pretrain(m, s.train, cfg), ConfigError);
}

TEST_CASE("BN running statistics follow the EMA recurrence over batch statistics") {
  auto s = blobs(2);
  zoo::Model m(zoo::builtin_spec("tiny-mobile", 1, 4, 4, 2), 4);
  std::vector<std::vector<std::pair<std::vector<double>, std::vector<double>>>> seen;
  zoo::PretrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.on_batch = [&](const zoo::ForwardResult& r) {
    std::vector<std::pair<std::vector<double>, std::vector<double>>> row;
    for (const auto& tap : r.bn_taps) row.emplace_back(tap.mean.value().vec(), tap.var.value().vec());
    seen.push_back(std::move(row));
  };
  zoo::pretrain(m, s.train, cfg);
  REQUIRE(!seen.empty());
  for (std::size_t l = 0; l < m.bn_states().size(); ++l) {
    const auto& st = m.bn_states()[l];
    for (std::size_t c = 0; c < st.running_mean.size(); ++c) {
      double rm = 0.0, rv = 1.0;
      for (const auto& row : seen) {
        rm = 0.9 * rm + 0.1 * row[l].first[c];
        rv = 0.9 * rv + 0.1 * row[l].second[c];
      }
      CHECK(std::abs(rm - st.running_mean[c]) <= 1e-9);
      CHECK(std::abs(rv - st.running_var[c]) <= 1e-9);
    }
  }
}

TEST_CASE("eval forward is independent of batch composition") {
  auto s = blobs(3);
  zoo::Model m(zoo::builtin_spec("tiny-resnet", 1, 4, 4, 2), 4);
  zoo::PretrainConfig cfg;
  cfg.epochs = 1;
  zoo::pretrain(m, s.train, cfg);
  std::vector<std::size_t> idx{0, 5, 9, 17};
  const Array all = m.predict(s.train.gather(idx));
  const Array again = m.predict(s.train.gather(idx));
  CHECK(all == again);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::size_t one[] = {idx[i]};
    const Array single = m.predict(s.train.gather(one));
    for (std::size_t k = 0; k < 2; ++k) CHECK(std::abs(single[k] - all[i * 2 + k]) <= 1e-12);
  }
}

TEST_CASE("model directory round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "gvbsm_test_zoo_model";
  std::filesystem::remove_all(dir);
  auto s = blobs(4);
  zoo::Model m(zoo::builtin_spec("tiny-shuffle", 1, 4, 4, 2), 4);
  zoo::PretrainConfig cfg;
  cfg.epochs = 1;
  zoo::pretrain(m, s.train, cfg);
  zoo::save_model(m, dir);
  zoo::Model back = zoo::load_model(dir);
  CHECK(back.spec().name == "tiny-shuffle");
  CHECK(back.epochs_trained == 1);
  for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(back.params()[i].value == m.params()[i].value);
  for (std::size_t i = 0; i < m.bn_states().size(); ++i) {
    CHECK(back.bn_states()[i].running_mean == m.bn_states()[i].running_mean);
    CHECK(back.bn_states()[i].running_var == m.bn_states()[i].running_var);
  }
  std::filesystem::resize_file(dir / (m.params()[0].path + ".bin"), 8);
  CHECK_THROWS_AS(zoo::load_model(dir), FormatError);
  CHECK_THROWS_AS(zoo::load_model(dir / "nope"), MissingArtifactError);
}
