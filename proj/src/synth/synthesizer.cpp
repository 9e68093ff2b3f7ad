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
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "gvbsm/error.hpp"
#include "gvbsm/synth/synthesizer.hpp"
#include "gvbsm/util/binio.hpp"
#include "gvbsm/util/hash.hpp"

namespace gvbsm::synth {

using ad::Array;
using ad::Shape;
using ad::Var;
using nlohmann::json;

InitMode parse_init_mode(const std::string& s) {
  if (s == "noise") return InitMode::kNoise;
  if (s == "real-init" || s == "real") return InitMode::kRealInit;
  throw ConfigError("unknown init mode '" + s + "' (expected noise or real-init)");
}

std::string init_mode_name(InitMode m) { return m == InitMode::kNoise ? "noise" : "real-init"; }

PlanMode parse_plan_mode(const std::string& s) {
  if (s == "original") return PlanMode::kOriginal;
  if (s == "reorder") return PlanMode::kReorder;
  throw ConfigError("unknown batch plan '" + s + "' (expected original or reorder)");
}

std::string plan_mode_name(PlanMode m) { return m == PlanMode::kOriginal ? "original" : "reorder"; }

namespace {

void clip(Array& x, const std::vector<double>& lower, const std::vector<double>& upper) {
  const auto c = static_cast<std::size_t>(x.dim(1));
  const std::size_t plane = static_cast<std::size_t>(x.dim(2) * x.dim(3));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t ch = (i / plane) % c;
    x[i] = std::clamp(x[i], lower[ch], upper[ch]);
  }
}

}  // namespace

SyntheticDataset init_synthetic(const data::Dataset& real, int ipc, InitMode mode, std::uint64_t seed) {
  if (ipc < 1) throw ConfigError("init_synthetic: ipc must be >= 1");
  if (real.size() == 0) throw ConfigError("init_synthetic: empty reference dataset");
  SyntheticDataset s;
  s.ipc = ipc;
  s.classes = real.classes;
  s.norm = real.norm;
  s.lower = real.lower_bounds();
  s.upper = real.upper_bounds();
  const auto n = static_cast<std::int64_t>(ipc) * real.classes;
  s.images = Array(Shape{n, real.channels(), real.height(), real.width()});
  for (std::int64_t i = 0; i < n; ++i) s.labels.push_back(static_cast<int>(i / ipc));
  std::mt19937_64 rng(util::derive_seed(seed, "init"));
  if (mode == InitMode::kNoise) {
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : s.images.data()) v = nd(rng);
    clip(s.images, s.lower, s.upper);
    return s;
  }
  const std::size_t numel = real.image_numel();
  for (int k = 0; k < real.classes; ++k) {
    auto pool = real.indices_of_class(k);
    if (pool.size() < static_cast<std::size_t>(ipc)) {
      throw ConfigError("init_synthetic: class " + std::to_string(k) + " has " + std::to_string(pool.size()) +
                        " real images, ipc " + std::to_string(ipc) + " requested");
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    for (int j = 0; j < ipc; ++j) {
      const std::size_t dst = static_cast<std::size_t>(k * ipc + j);
      std::copy_n(real.images.ptr() + pool[static_cast<std::size_t>(j)] * numel, numel, s.images.ptr() + dst * numel);
    }
  }
  return s;
}

BatchPlan make_batch_plan(PlanMode mode, int ipc, int classes, int target_batch) {
  if (ipc < 1 || classes < 1 || target_batch < 1) throw ConfigError("batch plan: ipc, classes and batch size must be >= 1");
  BatchPlan plan;
  plan.mode = mode;
  auto index = [ipc](int k, int j) { return static_cast<std::size_t>(k * ipc + j); };
  if (mode == PlanMode::kOriginal) {
    plan.samples_per_class = 1;
    plan.classes_per_batch = std::min(classes, target_batch);
    for (int j = 0; j < ipc; ++j)
      for (int k0 = 0; k0 < classes; k0 += plan.classes_per_batch) {
        std::vector<std::size_t> b;
        for (int k = k0; k < std::min(classes, k0 + plan.classes_per_batch); ++k) b.push_back(index(k, j));
        plan.batches.push_back(std::move(b));
      }
    return plan;
  }
  if (ipc < 2) {
    throw ConfigError("batch plan: the reorder loop needs ipc >= 2 (two samples per class); use --batch-plan original");
  }
  plan.samples_per_class = std::min(ipc, 10);
  plan.classes_per_batch =
      std::clamp(static_cast<int>(std::lround(static_cast<double>(target_batch) / plan.samples_per_class)), 1, classes);
  for (int j0 = 0; j0 < ipc; j0 += plan.samples_per_class)
    for (int k0 = 0; k0 < classes; k0 += plan.classes_per_batch) {
      std::vector<std::size_t> b;
      for (int k = k0; k < std::min(classes, k0 + plan.classes_per_batch); ++k)
        for (int j = j0; j < std::min(ipc, j0 + plan.samples_per_class); ++j) b.push_back(index(k, j));
      plan.batches.push_back(std::move(b));
    }
  return plan;
}

void SynthesisConfig::validate() const {
  if (iterations < 0) throw ConfigError("synthesis: iterations must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("synthesis: lr must be >= 0");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("synthesis: alpha must lie in [0,1)");
  if (!(beta_dr >= 0.0 && beta_dr <= 1.0)) throw ConfigError("synthesis: beta_dr must lie in [0,1]");
  if (!(tau_dd > 0.0)) throw ConfigError("synthesis: tau_dd must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("synthesis: Adam betas must lie in [0,1)");
  for (double w : {w_ce, w_bn, w_conv, w_dd})
    if (!(w >= 0.0)) throw ConfigError("synthesis: loss weights must be >= 0");
  if (batch_size < 1) throw ConfigError("synthesis: batch_size must be >= 1");
}

SynthRng::SynthRng(std::uint64_t seed)
    : backbone(util::derive_seed(seed, "synth/backbone")), drop(util::derive_seed(seed, "synth/drop")) {}

std::size_t draw_backbone(std::mt19937_64& rng, std::size_t pool_size) {
  return std::uniform_int_distribution<std::size_t>(0, pool_size - 1)(rng);
}

LossBreakdown synth_step(BatchState& st, const zoo::Model& model, const stats::StatBank& bank, EmaTotals& totals,
                         const SynthesisConfig& cfg, double lr, std::mt19937_64& drop_rng,
                         const std::vector<double>& lower, const std::vector<double>& upper) {
  ad::Tape tape;
  const Var x = tape.leaf(st.x, true);
  const auto r = model.forward(tape, x, {zoo::Mode::kEval, false});
  LossBreakdown out;
  Var total;
  auto add_term = [&](Var term, double w, double& slot) {
    if (!term.valid()) return;
    slot = term.value().item();
    const Var scaled = w == 1.0 ? term : ad::scale(term, w);
    total = total.valid() ? ad::add(total, scaled) : scaled;
  };
  if (cfg.w_ce > 0.0) add_term(ad::cross_entropy(r.logits, st.labels), cfg.w_ce, out.ce);
  if (cfg.w_bn > 0.0) add_term(sds_bn_loss(r.bn_taps, bank, totals), cfg.w_bn, out.bn);
  if (cfg.w_conv > 0.0) {
    DropRecord rec;
    add_term(sds_conv_loss(r.conv_taps, bank, totals, cfg.beta_dr, drop_rng, &rec), cfg.w_conv, out.conv);
    out.dropped = static_cast<int>(std::count(rec.dropped.begin(), rec.dropped.end(), true));
  }
  if (cfg.w_dd > 0.0) add_term(dd_loss(x, st.labels, cfg.tau_dd), cfg.w_dd, out.dd);
  if (!total.valid()) return out;
  out.total = total.value().item();
  if (!std::isfinite(out.total)) {
    std::ostringstream msg;
    msg << "synthesis: non-finite loss on '" << model.spec().name << "' (ce=" << out.ce << ", bn=" << out.bn
        << ", conv=" << out.conv << ", dd=" << out.dd << ", total=" << out.total << ")";
    throw NumericError(msg.str());
  }
  tape.backward(total);
  const Array g = tape.grad(x);
  auto& a = st.adam;
  if (a.m.shape() != st.x.shape()) {
    a.m = Array(st.x.shape(), 0.0);
    a.v = Array(st.x.shape(), 0.0);
    a.t = 0;
  }
  ++a.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, a.t);
  const double c2 = 1.0 - std::pow(cfg.beta2, a.t);
  for (std::size_t i = 0; i < g.size(); ++i) {
    a.m[i] = cfg.beta1 * a.m[i] + (1.0 - cfg.beta1) * g[i];
    a.v[i] = cfg.beta2 * a.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    st.x[i] -= lr * (a.m[i] / c1) / (std::sqrt(a.v[i] / c2) + cfg.adam_eps);
  }
  clip(st.x, lower, upper);
  if (!st.x.all_finite()) throw NumericError("synthesis: distilled images became non-finite");
  return out;
}

SyntheticDataset run_synthesis(const std::vector<const zoo::Model*>& pool,
                               const std::vector<const stats::StatBank*>& banks, SyntheticDataset s,
                               const SynthesisConfig& cfg, SynthesisTrace* trace, const SynthProgress& progress) {
  cfg.validate();
  if (pool.empty()) throw ConfigError("synthesis: backbone pool is empty");
  if (banks.size() != pool.size()) throw ConfigError("synthesis: one stat bank per pool member is required");
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (banks[i]->backbone != pool[i]->spec().name) {
      throw ConfigError("synthesis: bank for '" + banks[i]->backbone + "' paired with backbone '" +
                        pool[i]->spec().name + "'");
    }
    if (pool[i]->spec().classes != s.classes) throw ConfigError("synthesis: pool member class count differs");
  }
  const BatchPlan plan = make_batch_plan(cfg.plan, s.ipc, s.classes, cfg.batch_size);
  SynthRng rng(cfg.seed);
  std::vector<EmaTotals> totals;
  for (const auto* b : banks) totals.emplace_back(cfg.alpha, b->layers.size());
  if (trace != nullptr) trace->draws.assign(pool.size(), 0);
  const std::size_t numel = s.images.size() / s.size();
  for (std::size_t bi = 0; bi < plan.batches.size(); ++bi) {
    const auto& idx = plan.batches[bi];
    BatchState st;
    st.x = Array(Shape{static_cast<std::int64_t>(idx.size()), s.images.dim(1), s.images.dim(2), s.images.dim(3)});
    for (std::size_t j = 0; j < idx.size(); ++j) {
      std::copy_n(s.images.ptr() + idx[j] * numel, numel, st.x.ptr() + j * numel);
      st.labels.push_back(s.labels[idx[j]]);
    }
    for (int it = 0; it < cfg.iterations; ++it) {
      const double lr = cfg.cosine_lr
                            ? 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * it / static_cast<double>(cfg.iterations)))
                            : cfg.lr;
      const std::size_t m = draw_backbone(rng.backbone, pool.size());
      LossBreakdown lb = synth_step(st, *pool[m], *banks[m], totals[m], cfg, lr, rng.drop, s.lower, s.upper);
      lb.backbone = static_cast<int>(m);
      if (trace != nullptr) {
        ++trace->draws[m];
        if (it == 0) trace->first.push_back(lb);
        if (it + 1 == cfg.iterations) trace->last.push_back(lb);
      }
      if (progress) progress(bi, it, lb);
    }
    for (std::size_t j = 0; j < idx.size(); ++j) std::copy_n(st.x.ptr() + j * numel, numel, s.images.ptr() + idx[j] * numel);
  }
  return s;
}

std::uint64_t synthetic_hash(const SyntheticDataset& s) {
  return util::hash_ints(s.labels, util::hash_doubles(s.images.data()));
}

namespace {

// 8-bit grid of one class: images side by side, raw [0,1] pixel scale.
void write_preview(const SyntheticDataset& s, int k, const std::filesystem::path& path) {
  const auto c = static_cast<std::size_t>(s.images.dim(1));
  const auto h = static_cast<std::size_t>(s.images.dim(2));
  const auto w = static_cast<std::size_t>(s.images.dim(3));
  const auto n = static_cast<std::size_t>(s.ipc);
  const std::size_t width = n * (w + 1);
  const bool color = c == 3;
  std::vector<unsigned char> px(width * h * (color ? 3 : 1), 0);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t img = static_cast<std::size_t>(k) * n + j;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < (color ? 3 : 1); ++ch) {
          const double v = s.images[((img * c + ch) * h + y) * w + x] * s.norm.std[ch] + s.norm.mean[ch];
          const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
          px[(y * width + j * (w + 1) + x) * (color ? 3 : 1) + ch] = byte;
        }
  }
  std::string header = std::string(color ? "P6" : "P5") + "\n" + std::to_string(width) + " " + std::to_string(h) + "\n255\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), px.begin(), px.end());
  util::write_file(path, bytes);
}

}  // namespace

void save_synthetic(const SyntheticDataset& s, const std::filesystem::path& dir, bool previews) {
  std::filesystem::create_directories(dir);
  util::save_blob(dir / "images.bin", s.images.data(), util::FloatWidth::kF64);
  std::vector<unsigned char> lbl;
  for (int y : s.labels) util::put_u32(lbl, static_cast<std::uint32_t>(y));
  util::write_file(dir / "labels.bin", lbl);
  json j;
  j["format"] = "gvbsm-distilled";
  j["version"] = 1;
  j["ipc"] = s.ipc;
  j["classes"] = s.classes;
  j["shape"] = s.images.shape();
  j["norm"] = {{"mean", s.norm.mean}, {"std", s.norm.std}};
  j["bounds"] = {{"lower", s.lower}, {"upper", s.upper}};
  j["hash"] = synthetic_hash(s);
  util::write_text(dir / "manifest", j.dump(1) + "\n");
  if (previews && (s.images.dim(1) == 1 || s.images.dim(1) == 3)) {
    for (int k = 0; k < s.classes; ++k) {
      write_preview(s, k, dir / "previews" / ("class_" + std::to_string(k) + (s.images.dim(1) == 3 ? ".ppm" : ".pgm")));
    }
  }
}

SyntheticDataset load_synthetic(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest";
  const std::string text = util::read_text(manifest);
  try {
    const json j = json::parse(text);
    if (j.at("format") != "gvbsm-distilled") throw FormatError(manifest.string() + ": not a distilled dataset manifest");
    SyntheticDataset s;
    s.ipc = j.at("ipc").get<int>();
    s.classes = j.at("classes").get<int>();
    const auto shape = j.at("shape").get<Shape>();
    if (shape.size() != 4 || shape[0] != static_cast<std::int64_t>(s.ipc) * s.classes) {
      throw FormatError(manifest.string() + ": shape does not match ipc x classes");
    }
    s.images = Array(shape, util::load_blob(dir / "images.bin", ad::shape_numel(shape), util::FloatWidth::kF64));
    const auto lbl = util::read_file(dir / "labels.bin");
    if (lbl.size() != static_cast<std::size_t>(shape[0]) * 4) {
      throw FormatError((dir / "labels.bin").string() + ": expected " + std::to_string(shape[0] * 4) + " bytes, found " +
                        std::to_string(lbl.size()));
    }
    for (std::size_t i = 0; i < lbl.size(); i += 4) s.labels.push_back(static_cast<int>(util::get_u32(lbl.data() + i)));
    s.norm.mean = j.at("norm").at("mean").get<std::vector<double>>();
    s.norm.std = j.at("norm").at("std").get<std::vector<double>>();
    s.lower = j.at("bounds").at("lower").get<std::vector<double>>();
    s.upper = j.at("bounds").at("upper").get<std::vector<double>>();
    if (synthetic_hash(s) != j.at("hash").get<std::uint64_t>()) {
      throw FormatError((dir / "images.bin").string() + ": content hash mismatch");
    }
    return s;
  } catch (const json::exception& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
}

}  // namespace gvbsm::synth
