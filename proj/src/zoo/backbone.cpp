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
#include <numeric>
#include <random>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "gvbsm/error.hpp"
#include "gvbsm/util/binio.hpp"
#include "gvbsm/util/hash.hpp"
#include "gvbsm/zoo/backbone.hpp"

namespace gvbsm::zoo {

using ad::Array;
using ad::Shape;
using ad::Tape;
using ad::Var;
using nlohmann::json;

namespace {

constexpr double kNormEps = 1e-5;

const std::vector<std::pair<LayerKind, std::string>>& kind_table() {
  static const std::vector<std::pair<LayerKind, std::string>> table{
      {LayerKind::kConv, "conv"},
      {LayerKind::kBatchNorm, "batchnorm"},
      {LayerKind::kGroupNorm, "groupnorm"},
      {LayerKind::kRelu, "relu"},
      {LayerKind::kAvgPool, "avgpool"},
      {LayerKind::kGlobalAvgPool, "globalavgpool"},
      {LayerKind::kFlatten, "flatten"},
      {LayerKind::kLinear, "linear"},
      {LayerKind::kAdd, "add"},
      {LayerKind::kChannelShuffle, "channel_shuffle"},
  };
  return table;
}

int gn_groups(int channels) { return channels < 8 ? 1 : 8; }

// Small builder for the built-in graphs.
class Builder {
 public:
  explicit Builder(BackboneSpec& spec) : spec_(spec) {}

  int conv(const std::string& name, int out, int k, int stride, int groups = 1, bool bias = false,
           std::vector<int> in = {}) {
    LayerDesc d;
    d.kind = LayerKind::kConv;
    d.name = name;
    d.inputs = std::move(in);
    d.out_channels = out;
    d.kernel = k;
    d.stride = stride;
    d.padding = k / 2;
    d.groups = groups;
    d.bias = bias;
    return push(d);
  }
  int simple(LayerKind kind, const std::string& name, std::vector<int> in = {}) {
    LayerDesc d;
    d.kind = kind;
    d.name = name;
    d.inputs = std::move(in);
    return push(d);
  }
  int groupnorm(const std::string& name, int channels) {
    LayerDesc d;
    d.kind = LayerKind::kGroupNorm;
    d.name = name;
    d.groups = gn_groups(channels);
    return push(d);
  }
  int pool(const std::string& name, int k) {
    LayerDesc d;
    d.kind = LayerKind::kAvgPool;
    d.name = name;
    d.kernel = k;
    return push(d);
  }
  int shuffle(const std::string& name, int groups) {
    LayerDesc d;
    d.kind = LayerKind::kChannelShuffle;
    d.name = name;
    d.groups = groups;
    return push(d);
  }
  int linear(const std::string& name, int out) {
    LayerDesc d;
    d.kind = LayerKind::kLinear;
    d.name = name;
    d.out_channels = out;
    d.bias = true;
    return push(d);
  }
  int add(const std::string& name, int a, int b) { return simple(LayerKind::kAdd, name, {a, b}); }
  int conv_bn_relu(const std::string& name, int out, int k, int stride, int groups = 1, std::vector<int> in = {}) {
    conv(name + ".conv", out, k, stride, groups, false, std::move(in));
    simple(LayerKind::kBatchNorm, name + ".bn");
    return simple(LayerKind::kRelu, name + ".relu");
  }
  int last() const { return static_cast<int>(spec_.layers.size()) - 1; }

 private:
  int push(LayerDesc d) {
    spec_.layers.push_back(std::move(d));
    return last();
  }
  BackboneSpec& spec_;
};

void build_resnet(BackboneSpec& s, int w) {
  Builder b(s);
  const int stem = b.conv_bn_relu("stem", w, 3, 1);
  b.conv_bn_relu("s1.a", w, 3, 1);
  b.conv("s1.b.conv", w, 3, 1);
  const int s1 = b.simple(LayerKind::kBatchNorm, "s1.b.bn");
  b.add("s1.add", s1, stem);
  const int s1_out = b.simple(LayerKind::kRelu, "s1.relu");
  b.conv_bn_relu("s2.a", 2 * w, 3, 2);
  b.conv("s2.b.conv", 2 * w, 3, 1);
  const int s2 = b.simple(LayerKind::kBatchNorm, "s2.b.bn");
  b.conv("s2.down.conv", 2 * w, 1, 2, 1, false, {s1_out});
  const int down = b.simple(LayerKind::kBatchNorm, "s2.down.bn");
  b.add("s2.add", s2, down);
  b.simple(LayerKind::kRelu, "s2.relu");
  b.simple(LayerKind::kGlobalAvgPool, "gap");
  b.linear("fc", s.classes);
}

void build_convnet_gn(BackboneSpec& s, int w) {
  Builder b(s);
  int h = s.height, wd = s.width;
  for (int i = 0; i < 3; ++i) {
    const std::string n = "block" + std::to_string(i + 1);
    b.conv(n + ".conv", w, 3, 1, 1, true);
    b.groupnorm(n + ".gn", w);
    b.simple(LayerKind::kRelu, n + ".relu");
    if (h >= 2 && wd >= 2) {
      b.pool(n + ".pool", 2);
      h /= 2;
      wd /= 2;
    }
  }
  b.simple(LayerKind::kFlatten, "flatten");
  b.linear("fc", s.classes);
}

void build_mobile(BackboneSpec& s, int w) {
  Builder b(s);
  const int stem = b.conv_bn_relu("stem", w, 3, 1);
  b.conv_bn_relu("ir1.expand", 2 * w, 1, 1);
  b.conv_bn_relu("ir1.dw", 2 * w, 3, 1, 2 * w);
  b.conv("ir1.project.conv", w, 1, 1);
  const int p1 = b.simple(LayerKind::kBatchNorm, "ir1.project.bn");
  b.add("ir1.add", p1, stem);
  b.conv_bn_relu("ir2.expand", 2 * w, 1, 1);
  b.conv_bn_relu("ir2.dw", 2 * w, 3, 2, 2 * w);
  b.conv("ir2.project.conv", 2 * w, 1, 1);
  b.simple(LayerKind::kBatchNorm, "ir2.project.bn");
  b.simple(LayerKind::kGlobalAvgPool, "gap");
  b.linear("fc", s.classes);
}

void build_shuffle(BackboneSpec& s, int w) {
  Builder b(s);
  const int stem = b.conv_bn_relu("stem", w, 3, 1);
  b.conv_bn_relu("u1.g1", w, 1, 1, 2);
  b.shuffle("u1.shuffle", 2);
  b.conv("u1.dw.conv", w, 3, 1, w);
  b.simple(LayerKind::kBatchNorm, "u1.dw.bn");
  b.conv("u1.g2.conv", w, 1, 1, 2);
  const int g2 = b.simple(LayerKind::kBatchNorm, "u1.g2.bn");
  b.add("u1.add", g2, stem);
  b.simple(LayerKind::kRelu, "u1.relu");
  b.conv_bn_relu("u2.g1", 2 * w, 1, 1, 2);
  b.shuffle("u2.shuffle", 2);
  b.conv("u2.dw.conv", 2 * w, 3, 2, 2 * w);
  b.simple(LayerKind::kBatchNorm, "u2.dw.bn");
  b.conv_bn_relu("u2.g2", 2 * w, 1, 1, 2);
  b.simple(LayerKind::kGlobalAvgPool, "gap");
  b.linear("fc", s.classes);
}

// Shape of a layer output: [C,H,W] for maps, [F] after flatten/linear/GAP.
struct LayerShape {
  int c = 0, h = 0, w = 0;
  bool flat = false;
  int features() const { return flat ? c : c * h * w; }
};

[[noreturn]] void spec_fail(const BackboneSpec& s, std::size_t i, const std::string& msg) {
  const std::string lname = i < s.layers.size() ? s.layers[i].name : "?";
  throw ConfigError("backbone '" + s.name + "' layer " + std::to_string(i) + " (" + lname + "): " + msg);
}

std::vector<int> resolve_inputs(const BackboneSpec& s, std::size_t i) {
  const auto& d = s.layers[i];
  std::vector<int> in = d.inputs.empty() ? std::vector<int>{static_cast<int>(i) - 1} : d.inputs;
  const std::size_t want = d.kind == LayerKind::kAdd ? 2 : 1;
  if (in.size() != want) spec_fail(s, i, "expects " + std::to_string(want) + " input(s)");
  for (int j : in) {
    if (j < -1 || j >= static_cast<int>(i)) spec_fail(s, i, "input " + std::to_string(j) + " is not an earlier layer");
  }
  return in;
}

// Validates the graph and returns every layer's output shape.
std::vector<LayerShape> infer_shapes(const BackboneSpec& s) {
  if (s.layers.empty()) throw ConfigError("backbone '" + s.name + "' has no layers");
  if (s.in_channels < 1 || s.height < 1 || s.width < 1 || s.classes < 1) {
    throw ConfigError("backbone '" + s.name + "' has invalid input shape or class count");
  }
  const LayerShape input{s.in_channels, s.height, s.width, false};
  std::vector<LayerShape> out;
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const auto& d = s.layers[i];
    const auto in_idx = resolve_inputs(s, i);
    auto shape_of = [&](int j) { return j < 0 ? input : out[static_cast<std::size_t>(j)]; };
    LayerShape x = shape_of(in_idx[0]);
    auto need_map = [&] {
      if (x.flat) spec_fail(s, i, "needs a [C,H,W] input");
    };
    LayerShape y = x;
    switch (d.kind) {
      case LayerKind::kConv: {
        need_map();
        if (d.out_channels < 1 || d.kernel < 1 || d.stride < 1 || d.padding < 0 || d.groups < 1) {
          spec_fail(s, i, "invalid conv geometry");
        }
        if (x.c % d.groups != 0 || d.out_channels % d.groups != 0) spec_fail(s, i, "channels not divisible by groups");
        if (x.h + 2 * d.padding < d.kernel || x.w + 2 * d.padding < d.kernel) spec_fail(s, i, "kernel exceeds input");
        y.c = d.out_channels;
        y.h = (x.h + 2 * d.padding - d.kernel) / d.stride + 1;
        y.w = (x.w + 2 * d.padding - d.kernel) / d.stride + 1;
        break;
      }
      case LayerKind::kBatchNorm:
      case LayerKind::kRelu:
        if (d.kind == LayerKind::kBatchNorm) need_map();
        break;
      case LayerKind::kGroupNorm:
        need_map();
        if (d.groups < 1 || x.c % d.groups != 0) spec_fail(s, i, "channels not divisible by groups");
        break;
      case LayerKind::kChannelShuffle:
        need_map();
        if (d.groups < 1 || x.c % d.groups != 0) spec_fail(s, i, "channels not divisible by groups");
        break;
      case LayerKind::kAvgPool:
        need_map();
        if (d.kernel < 1 || x.h < d.kernel || x.w < d.kernel) spec_fail(s, i, "pool kernel exceeds input");
        y.h = x.h / d.kernel;
        y.w = x.w / d.kernel;
        break;
      case LayerKind::kGlobalAvgPool:
        need_map();
        y = {x.c, 1, 1, true};
        break;
      case LayerKind::kFlatten:
        y = {x.features(), 1, 1, true};
        break;
      case LayerKind::kLinear:
        if (!x.flat) spec_fail(s, i, "linear needs a flattened input");
        if (d.out_channels < 1) spec_fail(s, i, "invalid output size");
        y = {d.out_channels, 1, 1, true};
        break;
      case LayerKind::kAdd: {
        const LayerShape z = shape_of(in_idx[1]);
        if (x.c != z.c || x.h != z.h || x.w != z.w || x.flat != z.flat) spec_fail(s, i, "add inputs differ in shape");
        break;
      }
    }
    out.push_back(y);
  }
  const LayerShape& last = out.back();
  if (!last.flat || last.c != s.classes) {
    throw ConfigError("backbone '" + s.name + "' does not end in one logit per class");
  }
  return out;
}

Array kaiming_uniform(const Shape& shape, std::size_t fan_in, std::uint64_t seed) {
  Array a(shape);
  std::mt19937_64 rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : a.data()) v = u(rng);
  return a;
}

Array bias_uniform(std::int64_t n, std::size_t fan_in, std::uint64_t seed) {
  Array a(Shape{n});
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : a.data()) v = u(rng);
  return a;
}

}  // namespace

std::string layer_kind_name(LayerKind k) {
  for (const auto& [kind, name] : kind_table())
    if (kind == k) return name;
  return "?";
}

LayerKind parse_layer_kind(const std::string& s) {
  for (const auto& [kind, name] : kind_table())
    if (name == s) return kind;
  throw ConfigError("unknown layer kind '" + s + "'");
}

std::vector<std::string> builtin_names() { return {"tiny-resnet", "tiny-convnet-gn", "tiny-mobile", "tiny-shuffle"}; }

BackboneSpec builtin_spec(const std::string& name, int in_channels, int height, int width, int classes,
                          int base_width) {
  BackboneSpec s;
  s.name = name;
  s.in_channels = in_channels;
  s.height = height;
  s.width = width;
  s.classes = classes;
  if (name == "tiny-resnet") {
    build_resnet(s, base_width > 0 ? base_width : 8);
  } else if (name == "tiny-convnet-gn") {
    build_convnet_gn(s, base_width > 0 ? base_width : 16);
  } else if (name == "tiny-mobile") {
    build_mobile(s, base_width > 0 ? base_width : 8);
  } else if (name == "tiny-shuffle") {
    build_shuffle(s, base_width > 0 ? base_width : 16);
  } else {
    throw ConfigError("unknown backbone '" + name +
                      "' (expected tiny-resnet, tiny-convnet-gn, tiny-mobile or tiny-shuffle)");
  }
  infer_shapes(s);
  return s;
}

std::string spec_to_json(const BackboneSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["input"] = {spec.in_channels, spec.height, spec.width};
  j["classes"] = spec.classes;
  json layers = json::array();
  for (const auto& d : spec.layers) {
    layers.push_back({{"kind", layer_kind_name(d.kind)},
                      {"name", d.name},
                      {"inputs", d.inputs},
                      {"out", d.out_channels},
                      {"kernel", d.kernel},
                      {"stride", d.stride},
                      {"padding", d.padding},
                      {"groups", d.groups},
                      {"bias", d.bias}});
  }
  j["layers"] = layers;
  return j.dump(1);
}

BackboneSpec spec_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    BackboneSpec s;
    s.name = j.at("name").get<std::string>();
    const auto in = j.at("input").get<std::vector<int>>();
    if (in.size() != 3) throw ConfigError("backbone spec: input must be [C,H,W]");
    s.in_channels = in[0];
    s.height = in[1];
    s.width = in[2];
    s.classes = j.at("classes").get<int>();
    for (const auto& l : j.at("layers")) {
      LayerDesc d;
      d.kind = parse_layer_kind(l.at("kind").get<std::string>());
      d.name = l.at("name").get<std::string>();
      d.inputs = l.value("inputs", std::vector<int>{});
      d.out_channels = l.value("out", 0);
      d.kernel = l.value("kernel", 1);
      d.stride = l.value("stride", 1);
      d.padding = l.value("padding", 0);
      d.groups = l.value("groups", 1);
      d.bias = l.value("bias", false);
      s.layers.push_back(std::move(d));
    }
    infer_shapes(s);
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("backbone spec: ") + e.what());
  }
}

Model::Model(BackboneSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
  const auto shapes = infer_shapes(spec_);
  const LayerShape input{spec_.in_channels, spec_.height, spec_.width, false};
  layer_params_.resize(spec_.layers.size());
  auto add_param = [&](std::string path, Array value, bool decay) {
    params_.push_back({std::move(path), std::move(value)});
    decay_.push_back(decay);
    return static_cast<int>(params_.size()) - 1;
  };
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& d = spec_.layers[i];
    const auto in_idx = resolve_inputs(spec_, i);
    const LayerShape x = in_idx[0] < 0 ? input : shapes[static_cast<std::size_t>(in_idx[0])];
    auto& lp = layer_params_[i];
    const std::string wpath = d.name + ".weight";
    const std::string bpath = d.name + ".bias";
    switch (d.kind) {
      case LayerKind::kConv: {
        const std::size_t fan_in = static_cast<std::size_t>(x.c / d.groups * d.kernel * d.kernel);
        lp.weight = add_param(wpath,
                              kaiming_uniform(Shape{d.out_channels, x.c / d.groups, d.kernel, d.kernel}, fan_in,
                                              util::derive_seed(seed, wpath)),
                              true);
        if (d.bias) lp.bias = add_param(bpath, bias_uniform(d.out_channels, fan_in, util::derive_seed(seed, bpath)), false);
        break;
      }
      case LayerKind::kLinear: {
        const auto fan_in = static_cast<std::size_t>(x.features());
        lp.weight = add_param(wpath, kaiming_uniform(Shape{d.out_channels, x.features()}, fan_in, util::derive_seed(seed, wpath)),
                              true);
        if (d.bias) lp.bias = add_param(bpath, bias_uniform(d.out_channels, fan_in, util::derive_seed(seed, bpath)), false);
        break;
      }
      case LayerKind::kBatchNorm:
      case LayerKind::kGroupNorm:
        lp.weight = add_param(wpath, Array(Shape{x.c}, 1.0), false);
        lp.bias = add_param(bpath, Array(Shape{x.c}, 0.0), false);
        if (d.kind == LayerKind::kBatchNorm) {
          bn_.push_back({static_cast<int>(i), Array(Shape{x.c}, 0.0), Array(Shape{x.c}, 1.0)});
          lp.bn_state = static_cast<int>(bn_.size()) - 1;
        }
        break;
      default:
        break;
    }
  }
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

int Model::conv_count() const {
  return static_cast<int>(std::count_if(spec_.layers.begin(), spec_.layers.end(),
                                        [](const LayerDesc& d) { return d.kind == LayerKind::kConv; }));
}

int Model::bn_count() const { return static_cast<int>(bn_.size()); }

bool Model::weight_decayed(std::size_t param_index) const { return decay_.at(param_index); }

ForwardResult Model::forward(Tape& tape, Var x, const ForwardOptions& opt) const {
  const Shape want{x.shape().empty() ? 0 : x.shape()[0], spec_.in_channels, spec_.height, spec_.width};
  if (x.shape().size() != 4 || x.shape() != want || want[0] < 1) {
    throw ShapeError("backbone '" + spec_.name + "': input " + ad::shape_str(x.shape()) + " does not match [B," +
                     std::to_string(spec_.in_channels) + "," + std::to_string(spec_.height) + "," +
                     std::to_string(spec_.width) + "]");
  }
  ForwardResult r;
  r.params.reserve(params_.size());
  for (const auto& p : params_) r.params.push_back(tape.leaf(p.value, opt.params_require_grad));
  std::vector<Var> outs(spec_.layers.size());
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& d = spec_.layers[i];
    const auto& lp = layer_params_[i];
    const auto in_idx = resolve_inputs(spec_, i);
    auto get = [&](int j) { return j < 0 ? x : outs[static_cast<std::size_t>(j)]; };
    const Var h = get(in_idx[0]);
    auto param = [&](int idx) { return idx < 0 ? Var{} : r.params[static_cast<std::size_t>(idx)]; };
    Var y;
    switch (d.kind) {
      case LayerKind::kConv:
        y = ad::conv2d(h, param(lp.weight), param(lp.bias), {d.stride, d.padding, d.groups});
        r.conv_taps.push_back({static_cast<int>(i), y});
        break;
      case LayerKind::kBatchNorm: {
        const Var bm = ad::channel_mean(h);
        const Var bv = ad::channel_var(h);
        r.bn_taps.push_back({static_cast<int>(i), bm, bv});
        if (opt.mode == Mode::kTrain) {
          y = ad::batch_norm(h, bm, bv, param(lp.weight), param(lp.bias), kNormEps);
        } else {
          const auto& st = bn_[static_cast<std::size_t>(lp.bn_state)];
          y = ad::batch_norm(h, tape.constant(st.running_mean), tape.constant(st.running_var), param(lp.weight),
                             param(lp.bias), kNormEps);
        }
        break;
      }
      case LayerKind::kGroupNorm:
        y = ad::group_norm(h, d.groups, param(lp.weight), param(lp.bias), kNormEps);
        break;
      case LayerKind::kRelu:
        y = ad::relu(h);
        break;
      case LayerKind::kAvgPool:
        y = ad::avg_pool2d(h, d.kernel);
        break;
      case LayerKind::kGlobalAvgPool:
        y = ad::global_avg_pool(h);
        break;
      case LayerKind::kFlatten: {
        const auto& s = h.shape();
        std::int64_t f = 1;
        for (std::size_t k = 1; k < s.size(); ++k) f *= s[k];
        y = ad::reshape(h, Shape{s[0], f});
        break;
      }
      case LayerKind::kLinear:
        y = ad::linear(h, param(lp.weight), param(lp.bias));
        break;
      case LayerKind::kAdd:
        y = ad::add(h, get(in_idx[1]));
        break;
      case LayerKind::kChannelShuffle:
        y = ad::channel_shuffle(h, d.groups);
        break;
    }
    outs[i] = y;
  }
  r.logits = outs.back();
  return r;
}

void Model::update_running_stats(const ForwardResult& r, double momentum) {
  for (const auto& tap : r.bn_taps) {
    auto& st = bn_[static_cast<std::size_t>(layer_params_[static_cast<std::size_t>(tap.layer)].bn_state)];
    const Array& m = tap.mean.value();
    const Array& v = tap.var.value();
    for (std::size_t c = 0; c < m.size(); ++c) {
      st.running_mean[c] = (1.0 - momentum) * st.running_mean[c] + momentum * m[c];
      st.running_var[c] = (1.0 - momentum) * st.running_var[c] + momentum * v[c];
    }
  }
}

Array Model::predict(const Array& x) const {
  Tape tape;
  return forward(tape, tape.constant(x), {Mode::kEval, false}).logits.value();
}

double accuracy(const Model& model, const data::Dataset& ds, int batch_size) {
  if (ds.size() == 0) throw ConfigError("accuracy: empty dataset");
  std::size_t correct = 0;
  const auto bs = static_cast<std::size_t>(std::max(1, batch_size));
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += bs) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + bs); ++i) idx.push_back(i);
    const Array logits = model.predict(ds.gather(idx));
    const auto k = static_cast<std::size_t>(logits.dim(1));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double* row = logits.ptr() + b * k;
      const auto pred = static_cast<int>(std::max_element(row, row + k) - row);
      if (pred == ds.labels[idx[b]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

PretrainResult pretrain(Model& model, const data::Dataset& train, const PretrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
  if (train.size() == 0) throw ConfigError("pretrain: empty dataset");
  if (cfg.batch_size < 1 || !(cfg.lr > 0.0)) throw ConfigError("pretrain: batch_size and lr must be positive");
  if (train.classes != model.spec().classes) {
    throw ConfigError("pretrain: dataset has " + std::to_string(train.classes) + " classes, model expects " +
                      std::to_string(model.spec().classes));
  }
  std::mt19937_64 rng(util::derive_seed(cfg.seed, "pretrain"));
  auto& params = model.params();
  std::vector<Array> velocity;
  for (const auto& p : params) velocity.emplace_back(p.value.shape(), 0.0);
  const std::vector<double> fill = train.pad_values();
  const int c = train.channels(), h = train.height(), w = train.width();
  const std::size_t n = train.image_numel();
  std::vector<std::size_t> order(train.size());
  PretrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Array xb(Shape{static_cast<std::int64_t>(idx.size()), c, h, w});
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto aug = data::draw_augment(rng, cfg.crop_pad, train.flip_invariant);
        data::apply_augment(aug, train.images.data().subspan(idx[b] * n, n), xb.data().subspan(b * n, n), c, h, w,
                            fill);
      }
      const std::vector<int> yb = train.gather_labels(idx);
      Tape tape;
      const ForwardResult r = model.forward(tape, tape.constant(std::move(xb)), {Mode::kTrain, true});
      const Var loss = ad::cross_entropy(r.logits, yb);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        throw NumericError("pretrain '" + model.spec().name + "': non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches));
      }
      tape.backward(loss);
      for (std::size_t p = 0; p < params.size(); ++p) {
        const Array g = tape.grad(r.params[p]);
        auto& val = params[p].value;
        auto& vel = velocity[p];
        const double wd = model.weight_decayed(p) ? cfg.weight_decay : 0.0;
        for (std::size_t k = 0; k < val.size(); ++k) {
          vel[k] = cfg.momentum * vel[k] + g[k] + wd * val[k];
          val[k] -= cfg.lr * vel[k];
        }
      }
      model.update_running_stats(r, cfg.bn_momentum);
      if (cfg.on_batch) cfg.on_batch(r);
      loss_sum += lv;
      ++batches;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  model.epochs_trained += cfg.epochs;
  result.train_accuracy = accuracy(model, train);
  model.train_accuracy = result.train_accuracy;
  return result;
}

void save_model(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json j;
  j["format"] = "gvbsm-model";
  j["version"] = 1;
  j["spec"] = json::parse(spec_to_json(model.spec()));
  j["seed"] = model.seed();
  j["epochs"] = model.epochs_trained;
  j["classes"] = model.spec().classes;
  j["train_accuracy"] = model.train_accuracy;
  j["dtype"] = "f64";
  json params = json::array();
  for (const auto& p : model.params()) {
    const std::string file = p.path + ".bin";
    util::save_blob(dir / file, p.value.data(), util::FloatWidth::kF64);
    params.push_back({{"path", p.path}, {"shape", p.value.shape()}, {"file", file}, {"hash", util::hash_doubles(p.value.data())}});
  }
  j["params"] = params;
  json bn = json::array();
  for (const auto& st : model.bn_states()) {
    const std::string name = model.spec().layers[static_cast<std::size_t>(st.layer)].name;
    util::save_blob(dir / (name + ".running_mean.bin"), st.running_mean.data(), util::FloatWidth::kF64);
    util::save_blob(dir / (name + ".running_var.bin"), st.running_var.data(), util::FloatWidth::kF64);
    bn.push_back({{"layer", st.layer},
                  {"name", name},
                  {"hash", util::hash_doubles(st.running_var.data(), util::hash_doubles(st.running_mean.data()))}});
  }
  j["bn"] = bn;
  util::write_text(dir / "manifest", j.dump(1) + "\n");
}

Model load_model(const std::filesystem::path& dir) {
  const std::string text = util::read_text(dir / "manifest");
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError((dir / "manifest").string() + ": " + e.what());
  }
  try {
    if (j.at("format") != "gvbsm-model") throw FormatError((dir / "manifest").string() + ": not a model manifest");
    Model m(spec_from_json(j.at("spec").dump()), j.at("seed").get<std::uint64_t>());
    m.epochs_trained = j.at("epochs").get<int>();
    m.train_accuracy = j.value("train_accuracy", 0.0);
    const auto& params = j.at("params");
    if (params.size() != m.params().size()) {
      throw FormatError((dir / "manifest").string() + ": parameter count does not match the spec");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = m.params()[i];
      if (params[i].at("path").get<std::string>() != p.path) {
        throw FormatError((dir / "manifest").string() + ": parameter " + std::to_string(i) + " is '" +
                          params[i].at("path").get<std::string>() + "', expected '" + p.path + "'");
      }
      const auto file = dir / params[i].at("file").get<std::string>();
      p.value = Array(p.value.shape(), util::load_blob(file, p.value.size(), util::FloatWidth::kF64));
      if (util::hash_doubles(p.value.data()) != params[i].at("hash").get<std::uint64_t>()) {
        throw FormatError(file.string() + ": content hash mismatch");
      }
    }
    for (auto& st : m.bn_states()) {
      const std::string name = m.spec().layers[static_cast<std::size_t>(st.layer)].name;
      st.running_mean = Array(st.running_mean.shape(), util::load_blob(dir / (name + ".running_mean.bin"),
                                                                       st.running_mean.size(), util::FloatWidth::kF64));
      st.running_var = Array(st.running_var.shape(), util::load_blob(dir / (name + ".running_var.bin"),
                                                                     st.running_var.size(), util::FloatWidth::kF64));
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError((dir / "manifest").string() + ": " + e.what());
  }
}

}  // namespace gvbsm::zoo
