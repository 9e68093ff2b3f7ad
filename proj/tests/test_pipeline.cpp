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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "doctest.h"
#include "gvbsm/error.hpp"
#include "gvbsm/pipeline/pipeline.hpp"

namespace fs = std::filesystem;
using namespace gvbsm;
using namespace gvbsm::pipeline;
using nlohmann::json;

namespace {

PipelineConfig small_config(const fs::path& out, std::uint64_t seed) {
  PipelineConfig c;
  c.dataset.name = "blobs-2";
  c.dataset.train_per_class = 20;
  c.dataset.test_per_class = 10;
  c.pool = {"tiny-resnet", "tiny-mobile"};
  c.pretrain.epochs = 3;
  c.synthesis.ipc = 2;
  c.synthesis.config.iterations = 20;
  c.eval.config.epochs = 10;
  c.seed = seed;
  c.out = out.string();
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("gvbsm_test_pipeline_" + name);
  fs::remove_all(d);
  return d;
}

void flip_byte(const fs::path& file, std::streamoff at) {
  std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(at);
  char c = 0;
  f.get(c);
  f.seekp(at);
  f.put(static_cast<char>(c ^ 0x5a));
}

}  // namespace

TEST_CASE("config json round trip is lossless") {
  PipelineConfig c = small_config("x", 9);
  c.eval.gamma = 0.25;
  c.synthesis.config.alpha = 0.6;
  const std::string text = config_to_json(c);
  CHECK(config_to_json(config_from_json(text)) == text);
  CHECK(config_to_json(config_from_json("{}")) == config_to_json(PipelineConfig{}));
}

TEST_CASE("strict parsing rejects unknown keys and wrong types") {
  CHECK_THROWS_AS(config_from_json(R"({"synthesis":{"alhpa":0.5}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"bogus":1})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"synthesis":{"ipc":"ten"}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json("not json"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"pool":["resnet-9000"]})"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/gvbsm.json"), ConfigError);
}

TEST_CASE("set_key overrides dotted keys") {
  PipelineConfig c;
  set_key(c, "synthesis.alpha", "0.3");
  set_key(c, "relabel.ln", "false");
  set_key(c, "synthesis.plan", "original");
  set_key(c, "eval.gamma", "0.5");
  CHECK(c.synthesis.config.alpha == doctest::Approx(0.3));
  CHECK_FALSE(c.relabel.ln);
  CHECK(resolved_gamma(c) == doctest::Approx(0.5));
  CHECK_THROWS_AS(set_key(c, "synthesis.alpah", "0.3"), ConfigError);
  CHECK_THROWS_AS(set_key(c, "synthesis.alpha", "1.5"), ConfigError);
  CHECK_THROWS_AS(set_key(c, "", "1"), ConfigError);
}

TEST_CASE("gamma defaults per dataset") {
  PipelineConfig c;
  CHECK(resolved_gamma(c) == doctest::Approx(0.15));
  c.dataset.name = "blobs-2";
  CHECK(resolved_gamma(c) == doctest::Approx(0.1));
}

TEST_CASE("stage seeds are distinct and reproducible") {
  const StageSeeds a = stage_seeds(5), b = stage_seeds(5), c = stage_seeds(6);
  CHECK(a.synthesis == b.synthesis);
  CHECK(a.synthesis != c.synthesis);
  CHECK(a.dataset != a.synthesis);
  CHECK(a.relabel != a.eval);
  CHECK(a.pretrain("tiny-resnet") != a.pretrain("tiny-mobile"));
}

TEST_CASE("stages refuse to run without their inputs") {
  const fs::path d = fresh_dir("missing");
  const PipelineConfig c = small_config(d, 1);
  try {
    run_synthesize(c);
    FAIL("expected MissingArtifactError");
  } catch (const MissingArtifactError& e) {
    CHECK(std::string(e.what()).find("capture-stats") != std::string::npos);
  }
  CHECK_THROWS_AS(run_capture(c), MissingArtifactError);
  CHECK_THROWS_AS(run_evaluate(c), MissingArtifactError);
  CHECK_THROWS_AS(run_stage(c, "distill"), ConfigError);
  CHECK_THROWS_AS(diag_json(d / "distilled"), MissingArtifactError);
}

TEST_CASE("pipeline is deterministic, keeps predecessors intact and replays from its log") {
  const fs::path a = fresh_dir("a"), b = fresh_dir("b");
  const PipelineConfig ca = small_config(a, 11), cb = small_config(b, 11);
  const eval::EvalReport ra = run_pipeline(ca);
  const eval::EvalReport rb = run_pipeline(cb);
  CHECK(ra.accuracy == rb.accuracy);
  CHECK(ra.loss_curve == rb.loss_curve);
  for (const char* sub : {"models", "banks", "distilled", "labels"}) {
    CAPTURE(sub);
    CHECK(artifact_hash(a / sub) == artifact_hash(b / sub));
  }

  const auto distilled = artifact_hash(a / "distilled");
  const auto banks = artifact_hash(a / "banks");
  run_relabel(ca);
  run_evaluate(ca);
  CHECK(artifact_hash(a / "distilled") == distilled);
  CHECK(artifact_hash(a / "banks") == banks);

  const PipelineConfig replay = config_from_log(a / "run.log");
  CHECK(config_to_json(replay) == config_to_json(ca));
  const json report = json::parse(run_evaluate(replay).summary_json);
  CHECK(report.at("accuracy").get<double>() == ra.accuracy);

  const json diag = json::parse(diag_json(a / "distilled"));
  CHECK(diag.at("images").get<int>() == 4);
  CHECK(diag.contains("mean_cosine"));

  SUBCASE("a different master seed is a different dataset") {
    CHECK_THROWS_AS(run_relabel(small_config(a, 12)), ConfigError);
  }
  SUBCASE("edited upstream artifacts are detected") {
    flip_byte(a / "distilled" / "images.bin", 40);
    try {
      run_relabel(ca);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("synthesize") != std::string::npos);
    }
  }
  SUBCASE("a different seed produces a different distilled set") {
    const fs::path c = fresh_dir("c");
    run_pipeline(small_config(c, 12));
    CHECK(artifact_hash(c / "distilled") != distilled);
    fs::remove_all(c);
  }
  fs::remove_all(b);
}
