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
#include <span>
#include <string>
#include <vector>

#include "gvbsm/ad/ops.hpp"
#include "gvbsm/data/dataset.hpp"
#include "gvbsm/relabel/relabeler.hpp"
#include "gvbsm/synth/synthesizer.hpp"

namespace gvbsm::eval {

/// Batch mean of ||s - z||^2 - gamma * log softmax(s)[y].
ad::Var kd_eval_loss(ad::Var student, const ad::Array& teacher, std::span<const int> labels, double gamma);

/// tau^2 * KL(softmax(p / tau) || softmax(q / tau)) of two logit vectors.
double tempered_kl(std::span<const double> p, std::span<const double> q, double tau);

struct EvalConfig {
  std::string model = "tiny-convnet-gn";
  int epochs = 200;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double gamma = 0.1;
  int batch_size = 0;  // 0: |S| when |S| <= 100, else 64
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Batch size used for a distilled set of n images under the config.
int eval_batch_size(const EvalConfig& cfg, std::size_t n);

struct EvalReport {
  std::string model;
  double accuracy = 0.0;
  std::size_t test_size = 0;
  std::size_t train_size = 0;
  std::vector<double> loss_curve;  // mean loss per epoch
  std::string config_json;
  std::uint64_t seed = 0;
};

/// Trains a fresh evaluation model on the distilled set against the stored
/// soft labels, replaying each record's view, and scores it on `test`.
EvalReport train_eval_model(const synth::SyntheticDataset& s, const relabel::SoftLabelStore& store,
                            const data::Dataset& test, const EvalConfig& cfg);

/// Writes report.json and loss.csv into `dir`.
void write_report(const EvalReport& r, const std::filesystem::path& dir);
EvalReport read_report(const std::filesystem::path& dir);

struct DiversityReport {
  std::vector<int> classes;             // classes with >= 2 images
  std::vector<double> class_cosine;     // mean pairwise cosine similarity
  std::vector<double> class_min_eigen;  // smallest Gram eigenvalue
  double mean_cosine = 0.0;
  double mean_min_eigen = 0.0;
};

DiversityReport diversity_metric(const ad::Array& images, std::span<const int> labels);
inline DiversityReport diversity_metric(const synth::SyntheticDataset& s) {
  return diversity_metric(s.images, s.labels);
}

}  // namespace gvbsm::eval
