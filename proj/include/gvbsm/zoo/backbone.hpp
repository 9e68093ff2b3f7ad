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
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "gvbsm/ad/ops.hpp"
#include "gvbsm/data/dataset.hpp"

namespace gvbsm::zoo {

enum class LayerKind {
  kConv,
  kBatchNorm,
  kGroupNorm,
  kRelu,
  kAvgPool,
  kGlobalAvgPool,
  kFlatten,
  kLinear,
  kAdd,
  kChannelShuffle,
};

std::string layer_kind_name(LayerKind k);
/// Throws ConfigError naming the unknown kind.
LayerKind parse_layer_kind(const std::string& s);

/// One node of a backbone graph. `inputs` refers to earlier layer indices;
/// empty means the previous layer and -1 the network input. Only kAdd takes
/// two inputs.
struct LayerDesc {
  LayerKind kind = LayerKind::kRelu;
  std::string name;
  std::vector<int> inputs;
  int out_channels = 0;  // conv, linear
  int kernel = 1;        // conv, avgpool
  int stride = 1;
  int padding = 0;
  int groups = 1;        // conv, groupnorm, channel_shuffle
  bool bias = false;
};

struct BackboneSpec {
  std::string name;
  int in_channels = 1;
  int height = 16;
  int width = 16;
  int classes = 10;
  std::vector<LayerDesc> layers;
};

/// Built-in miniature backbones: tiny-resnet, tiny-convnet-gn, tiny-mobile,
/// tiny-shuffle. `width` 0 selects the default base width.
BackboneSpec builtin_spec(const std::string& name, int in_channels, int height, int width, int classes,
                          int base_width = 0);
std::vector<std::string> builtin_names();

std::string spec_to_json(const BackboneSpec& spec);
BackboneSpec spec_from_json(const std::string& text);

struct ParamTensor {
  std::string path;  // "<layer>.weight", "<layer>.bias"
  ad::Array value;
};

struct BnState {
  int layer = 0;
  ad::Array running_mean;
  ad::Array running_var;
};

enum class Mode { kTrain, kEval };

struct ForwardOptions {
  Mode mode = Mode::kEval;
  bool params_require_grad = false;
};

struct BnTap {
  int layer = 0;  // index into spec.layers
  ad::Var mean;   // batch statistics of the layer input
  ad::Var var;
};

struct ConvTap {
  int layer = 0;
  ad::Var output;  // raw convolution output
};

struct ForwardResult {
  ad::Var logits;
  std::vector<ConvTap> conv_taps;
  std::vector<BnTap> bn_taps;
  std::vector<ad::Var> params;  // aligned with Model::params()
};

/// Parameterised backbone. Forward is const; training code mutates
/// parameters and running statistics through the explicit accessors.
class Model {
 public:
  /// Kaiming-uniform (fan-in) init for conv/linear weights, ones/zeros for
  /// norm scale/shift. Rejects malformed specs.
  Model(BackboneSpec spec, std::uint64_t seed);

  const BackboneSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<ParamTensor>& params() { return params_; }
  const std::vector<ParamTensor>& params() const { return params_; }
  std::vector<BnState>& bn_states() { return bn_; }
  const std::vector<BnState>& bn_states() const { return bn_; }
  std::size_t parameter_count() const;
  int conv_count() const;
  int bn_count() const;

  /// Train mode normalises BN layers with batch statistics; eval mode with
  /// running statistics. BN taps always carry the batch statistics of x.
  ForwardResult forward(ad::Tape& tape, ad::Var x, const ForwardOptions& opt = {}) const;

  /// running = (1 - momentum) * running + momentum * batch (biased variance).
  void update_running_stats(const ForwardResult& r, double momentum);

  /// Eval-mode logits for a batch, without gradients.
  ad::Array predict(const ad::Array& x) const;

  bool weight_decayed(std::size_t param_index) const;

  int epochs_trained = 0;
  double train_accuracy = 0.0;

 private:
  struct LayerParams {
    int weight = -1;
    int bias = -1;
    int bn_state = -1;
  };

  BackboneSpec spec_;
  std::uint64_t seed_;
  std::vector<ParamTensor> params_;
  std::vector<BnState> bn_;
  std::vector<LayerParams> layer_params_;
  std::vector<bool> decay_;
};

struct PretrainConfig {
  int epochs = 5;
  int batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double bn_momentum = 0.1;
  int crop_pad = 2;
  std::uint64_t seed = 0;
  // Observes every training forward after the running-stat update.
  std::function<void(const ForwardResult&)> on_batch;
};

struct PretrainResult {
  double train_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

/// Cross-entropy + momentum SGD with crop (and flip when the dataset allows
/// it). Throws NumericError when the loss stops being finite.
PretrainResult pretrain(Model& model, const data::Dataset& train, const PretrainConfig& cfg);

double accuracy(const Model& model, const data::Dataset& ds, int batch_size = 100);

/// Model directory: `manifest` (JSON) plus one blob per parameter tensor and
/// per BN running statistic.
void save_model(const Model& model, const std::filesystem::path& dir);
Model load_model(const std::filesystem::path& dir);

}  // namespace gvbsm::zoo
