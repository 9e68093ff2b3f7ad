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

#include <json.hpp>

#include "gvbsm/ad/ops.hpp"
#include "gvbsm/error.hpp"
#include "gvbsm/stats/stat_bank.hpp"
#include "gvbsm/util/hash.hpp"

namespace gvbsm::stats {

using ad::Array;
using ad::Shape;
using nlohmann::json;

std::vector<const LayerStats*> StatBank::of_kind(StatKind k) const {
  std::vector<const LayerStats*> out;
  for (const auto& l : layers)
    if (l.kind == k) out.push_back(&l);
  return out;
}

PatchStats patch_reduce(const Array& feature, int n_p) {
  ad::Tape t;
  const auto x = t.constant(feature);
  return {ad::patch_mean(x, n_p).value(), ad::patch_var(x, n_p).value()};
}

int default_patch_size(int height, int width) { return std::max(height, width) <= 64 ? 4 : 16; }

int layer_patch_size(int n_p, int h, int w) { return std::min(n_p, std::max(h, w)); }

namespace {

void accumulate(Array& acc, const Array& v) {
  if (acc.empty()) {
    acc = Array(v.shape(), 0.0);
  }
  for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
}

void divide(Array& a, double n) {
  for (auto& v : a.data()) v /= n;
}

}  // namespace

StatBank capture_stats(const zoo::Model& model, const data::Dataset& ds, const CaptureOptions& opt) {
  if (ds.size() == 0) throw ConfigError("capture-stats: empty dataset");
  if (opt.batch_size < 1) throw ConfigError("capture-stats: batch_size must be >= 1");
  const auto& spec = model.spec();
  if (ds.channels() != spec.in_channels || ds.height() != spec.height || ds.width() != spec.width) {
    throw ConfigError("capture-stats: dataset images do not match the input shape of '" + spec.name + "'");
  }
  StatBank bank;
  bank.backbone = spec.name;
  bank.dataset = data::fingerprint(ds);
  bank.n_p = opt.n_p > 0 ? opt.n_p : default_patch_size(ds.height(), ds.width());
  bank.batch_size = opt.batch_size;

  std::vector<LayerStats> conv;
  const auto bs = static_cast<std::size_t>(opt.batch_size);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += bs) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + bs); ++i) idx.push_back(i);
    ad::Tape tape;
    const auto r = model.forward(tape, tape.constant(ds.gather(idx)), {zoo::Mode::kEval, false});
    if (conv.empty()) conv.resize(r.conv_taps.size());
    for (std::size_t k = 0; k < r.conv_taps.size(); ++k) {
      const auto& tap = r.conv_taps[k];
      const auto& fs = tap.output.shape();
      auto& ls = conv[k];
      ls.layer = tap.layer;
      ls.kind = StatKind::kConv;
      ls.n_p = layer_patch_size(bank.n_p, static_cast<int>(fs[2]), static_cast<int>(fs[3]));
      accumulate(ls.channel_mean, ad::channel_mean(tap.output).value());
      accumulate(ls.channel_var, ad::channel_var(tap.output).value());
      accumulate(ls.patch_mean, ad::patch_mean(tap.output, ls.n_p).value());
      accumulate(ls.patch_var, ad::patch_var(tap.output, ls.n_p).value());
    }
    ++bank.batches;
  }
  const auto nb = static_cast<double>(bank.batches);
  for (auto& ls : conv) {
    divide(ls.channel_mean, nb);
    divide(ls.channel_var, nb);
    divide(ls.patch_mean, nb);
    divide(ls.patch_var, nb);
  }
  for (const auto& st : model.bn_states()) {
    LayerStats ls;
    ls.layer = st.layer;
    ls.kind = StatKind::kBn;
    ls.channel_mean = st.running_mean;
    ls.channel_var = st.running_var;
    conv.push_back(std::move(ls));
  }
  std::stable_sort(conv.begin(), conv.end(), [](const LayerStats& a, const LayerStats& b) { return a.layer < b.layer; });
  for (std::size_t i = 0; i < conv.size(); ++i) conv[i].index = static_cast<int>(i);
  bank.layers = std::move(conv);
  return bank;
}

namespace {

const char* kind_name(StatKind k) { return k == StatKind::kBn ? "bn" : "conv"; }

std::vector<double> as_stored(std::span<const double> v, util::FloatWidth w) {
  std::vector<double> out(v.begin(), v.end());
  if (w == util::FloatWidth::kF32)
    for (auto& x : out) x = static_cast<double>(static_cast<float>(x));
  return out;
}

std::string blob_name(int index, const char* family) {
  return "l" + std::to_string(index) + "." + family + ".bin";
}

}  // namespace

void save_bank(const StatBank& bank, const std::filesystem::path& dir, util::FloatWidth width) {
  std::filesystem::create_directories(dir);
  json j;
  j["format"] = "gvbsm-stat-bank";
  j["version"] = 1;
  j["backbone"] = bank.backbone;
  j["dataset"] = {{"size", bank.dataset.size}, {"classes", bank.dataset.classes}, {"content_hash", bank.dataset.content_hash}};
  j["n_p"] = bank.n_p;
  j["batch_size"] = bank.batch_size;
  j["batches"] = bank.batches;
  j["dtype"] = util::float_width_name(width);
  json layers = json::array();
  for (const auto& ls : bank.layers) {
    json files;
    auto put = [&](const char* family, const Array& a) {
      const std::string name = blob_name(ls.index, family);
      util::save_blob(dir / name, a.data(), width);
      files[family] = {{"file", name}, {"shape", a.shape()}, {"hash", util::hash_doubles(as_stored(a.data(), width))}};
    };
    put("cm", ls.channel_mean);
    put("cv", ls.channel_var);
    if (ls.kind == StatKind::kConv) {
      put("pm", ls.patch_mean);
      put("pv", ls.patch_var);
    }
    layers.push_back({{"index", ls.index}, {"layer", ls.layer}, {"kind", kind_name(ls.kind)}, {"n_p", ls.n_p}, {"files", files}});
  }
  j["layers"] = layers;
  util::write_text(dir / "manifest", j.dump(1) + "\n");
}

StatBank load_bank(const std::filesystem::path& dir, const LoadExpectations& expect, std::vector<std::string>* warnings) {
  const auto manifest = dir / "manifest";
  const std::string text = util::read_text(manifest);
  try {
    const json j = json::parse(text);
    if (j.at("format") != "gvbsm-stat-bank") throw FormatError(manifest.string() + ": not a stat bank manifest");
    StatBank bank;
    bank.backbone = j.at("backbone").get<std::string>();
    if (!expect.backbone.empty() && expect.backbone != bank.backbone) {
      throw ConfigError(manifest.string() + ": bank was captured for backbone '" + bank.backbone + "', expected '" +
                        expect.backbone + "'");
    }
    const auto& d = j.at("dataset");
    bank.dataset = {d.at("size").get<std::uint64_t>(), d.at("classes").get<int>(), d.at("content_hash").get<std::uint64_t>()};
    if (expect.dataset != nullptr && !(*expect.dataset == bank.dataset)) {
      const std::string msg = manifest.string() + ": dataset fingerprint differs from the requested dataset";
      if (warnings != nullptr) warnings->push_back(msg);
    }
    bank.n_p = j.at("n_p").get<int>();
    bank.batch_size = j.at("batch_size").get<int>();
    bank.batches = j.at("batches").get<std::uint64_t>();
    const auto width = util::parse_float_width(j.at("dtype").get<std::string>());
    for (const auto& l : j.at("layers")) {
      LayerStats ls;
      ls.index = l.at("index").get<int>();
      ls.layer = l.at("layer").get<int>();
      const auto kind = l.at("kind").get<std::string>();
      if (kind != "bn" && kind != "conv") throw FormatError(manifest.string() + ": unknown layer kind '" + kind + "'");
      ls.kind = kind == "bn" ? StatKind::kBn : StatKind::kConv;
      ls.n_p = l.at("n_p").get<int>();
      const auto& files = l.at("files");
      auto get = [&](const char* family) {
        const auto& f = files.at(family);
        const auto shape = f.at("shape").get<Shape>();
        const auto path = dir / f.at("file").get<std::string>();
        Array a(shape, util::load_blob(path, ad::shape_numel(shape), width));
        if (util::hash_doubles(a.data()) != f.at("hash").get<std::uint64_t>()) {
          throw FormatError(path.string() + ": content hash mismatch (corrupt blob)");
        }
        return a;
      };
      ls.channel_mean = get("cm");
      ls.channel_var = get("cv");
      if (ls.kind == StatKind::kConv) {
        ls.patch_mean = get("pm");
        ls.patch_var = get("pv");
      }
      for (const Array* v : {&ls.channel_var, &ls.patch_var})
        for (double x : v->data())
          if (!(x >= 0.0) || !std::isfinite(x)) {
            throw FormatError(manifest.string() + ": layer " + std::to_string(ls.index) + " has an invalid variance");
          }
      bank.layers.push_back(std::move(ls));
    }
    return bank;
  } catch (const json::exception& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
}

}  // namespace gvbsm::stats
