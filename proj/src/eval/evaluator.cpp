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
#include "gvbsm/eval/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gvbsm/error.hpp"
#include "gvbsm/util/binio.hpp"
#include "gvbsm/util/hash.hpp"
#include "gvbsm/zoo/backbone.hpp"

namespace gvbsm::eval {

using ad::Array;
using ad::Shape;
using ad::Tape;
using ad::Var;
using json = nlohmann::json;

Var kd_eval_loss(Var student, const Array& teacher, std::span<const int> labels, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("kd_eval_loss: gamma must be >= 0");
  if (student.shape().size() != 2 || student.shape() != teacher.shape() ||
      static_cast<std::size_t>(student.shape()[0]) != labels.size()) {
    throw ShapeError("kd_eval_loss: student " + ad::shape_str(student.shape()) + ", teacher " +
                     ad::shape_str(teacher.shape()) + ", " + std::to_string(labels.size()) + " labels");
  }
  if (!student.value().all_finite() || !teacher.all_finite()) throw NumericError("kd_eval_loss: non-finite logits");
  Tape& t = student.tape();
  const double b = static_cast<double>(labels.size());
  Var loss = ad::scale(ad::squared_error(student, t.constant(teacher)), 1.0 / b);
  if (gamma > 0.0) loss = ad::add(loss, ad::scale(ad::cross_entropy(student, labels), gamma));
  return loss;
}

double tempered_kl(std::span<const double> p, std::span<const double> q, double tau) {
  if (p.size() != q.size() || p.empty()) throw ShapeError("tempered_kl: logit vectors differ in length");
  if (!(tau > 0.0)) throw ConfigError("tempered_kl: tau must be positive");
  auto log_softmax = [tau](std::span<const double> z) {
    std::vector<double> out(z.size());
    const double mx = *std::max_element(z.begin(), z.end()) / tau;
    double s = 0.0;
    for (double v : z) s += std::exp(v / tau - mx);
    const double lse = mx + std::log(s);
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] / tau - lse;
    return out;
  };
  const auto lp = log_softmax(p), lq = log_softmax(q);
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  return tau * tau * kl;
}

void EvalConfig::validate() const {
  if (epochs < 1) throw ConfigError("eval: epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("eval: lr must be positive");
  if (!(gamma >= 0.0)) throw ConfigError("eval: gamma must be >= 0");
  if (batch_size < 0) throw ConfigError("eval: batch_size must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("eval: betas must lie in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("eval: weight_decay must be >= 0");
}

int eval_batch_size(const EvalConfig& cfg, std::size_t n) {
  if (cfg.batch_size > 0) return static_cast<int>(std::min<std::size_t>(n, static_cast<std::size_t>(cfg.batch_size)));
  return n <= 100 ? static_cast<int>(n) : 64;
}

namespace {

json config_echo(const EvalConfig& cfg, const relabel::SoftLabelStore& store) {
  return {{"model", cfg.model},
          {"epochs", cfg.epochs},
          {"lr", cfg.lr},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"adam_eps", cfg.adam_eps},
          {"weight_decay", cfg.weight_decay},
          {"gamma", cfg.gamma},
          {"batch_size", cfg.batch_size},
          {"bn_momentum", cfg.bn_momentum},
          {"seed", cfg.seed},
          {"store", {{"epochs", store.epochs}, {"ln", store.use_ln}, {"crop_pad", store.crop_pad}, {"flip", store.flip}}}};
}

}  // namespace

EvalReport train_eval_model(const synth::SyntheticDataset& s, const relabel::SoftLabelStore& store,
                            const data::Dataset& test, const EvalConfig& cfg) {
  cfg.validate();
  if (s.size() == 0) throw ConfigError("eval: distilled set is empty");
  if (store.images != s.size() || store.classes != static_cast<std::uint32_t>(s.classes)) {
    throw ConfigError("eval: soft-label store covers " + std::to_string(store.images) + " images / " +
                      std::to_string(store.classes) + " classes, distilled set has " + std::to_string(s.size()) +
                      " / " + std::to_string(s.classes));
  }
  if (test.classes != s.classes) throw ConfigError("eval: test set class count differs from the distilled set");
  if (static_cast<std::uint32_t>(cfg.epochs) > store.epochs) {
    throw MissingArtifactError("eval: " + std::to_string(cfg.epochs) + " epochs requested, store holds " +
                               std::to_string(store.epochs));
  }
  const int c = static_cast<int>(s.images.dim(1)), h = static_cast<int>(s.images.dim(2)),
            w = static_cast<int>(s.images.dim(3));
  zoo::Model model(zoo::builtin_spec(cfg.model, c, h, w, s.classes), util::derive_seed(cfg.seed, "eval/init"));
  std::mt19937_64 rng(util::derive_seed(cfg.seed, "eval/order"));
  auto& params = model.params();
  std::vector<Array> m1, m2;
  for (const auto& p : params) {
    m1.emplace_back(p.value.shape(), 0.0);
    m2.emplace_back(p.value.shape(), 0.0);
  }
  const std::size_t n = s.images.size() / s.size();
  const auto bs = static_cast<std::size_t>(eval_batch_size(cfg, s.size()));
  const auto k = static_cast<std::size_t>(s.classes);
  std::vector<std::size_t> order(s.size());
  EvalReport rep;
  rep.model = cfg.model;
  rep.seed = cfg.seed;
  rep.train_size = s.size();
  rep.test_size = test.size();
  rep.config_json = config_echo(cfg, store).dump();
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += bs) {
      const std::size_t b1 = std::min(order.size(), b0 + bs);
      Array xb(Shape{static_cast<std::int64_t>(b1 - b0), c, h, w});
      Array zb(Shape{static_cast<std::int64_t>(b1 - b0), s.classes});
      std::vector<int> yb;
      for (std::size_t j = b0; j < b1; ++j) {
        const auto i = static_cast<std::uint32_t>(order[j]);
        const std::uint64_t seed = store.view_seed(static_cast<std::uint32_t>(epoch), i);
        const auto* rec = store.find(i, seed);
        if (rec == nullptr) {
          throw MissingArtifactError("eval: no soft label for (image " + std::to_string(i) + ", seed " +
                                     std::to_string(seed) + ", epoch " + std::to_string(epoch) + ")");
        }
        const Array v = relabel::augmented_view(s, i, seed, static_cast<int>(store.crop_pad), store.flip);
        std::copy(v.vec().begin(), v.vec().end(), xb.vec().begin() + (j - b0) * n);
        for (std::size_t q = 0; q < k; ++q) zb[(j - b0) * k + q] = rec->logits[q];
        yb.push_back(s.labels[i]);
      }
      Tape tape;
      const auto r = model.forward(tape, tape.constant(std::move(xb)), {zoo::Mode::kTrain, true});
      const Var loss = kd_eval_loss(r.logits, zb, yb, cfg.gamma);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        throw NumericError("eval: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches));
      }
      tape.backward(loss);
      ++step;
      const double c1 = 1.0 - std::pow(cfg.beta1, step), c2 = 1.0 - std::pow(cfg.beta2, step);
      for (std::size_t p = 0; p < params.size(); ++p) {
        const Array g = tape.grad(r.params[p]);
        auto& val = params[p].value;
        const double decay = model.weight_decayed(p) ? cfg.lr * cfg.weight_decay : 0.0;
        for (std::size_t q = 0; q < val.size(); ++q) {
          val[q] -= decay * val[q];
          m1[p][q] = cfg.beta1 * m1[p][q] + (1.0 - cfg.beta1) * g[q];
          m2[p][q] = cfg.beta2 * m2[p][q] + (1.0 - cfg.beta2) * g[q] * g[q];
          val[q] -= cfg.lr * (m1[p][q] / c1) / (std::sqrt(m2[p][q] / c2) + cfg.adam_eps);
        }
      }
      model.update_running_stats(r, cfg.bn_momentum);
      loss_sum += lv;
      ++batches;
    }
    rep.loss_curve.push_back(loss_sum / batches);
  }
  model.epochs_trained = cfg.epochs;
  rep.accuracy = test.size() == 0 ? 0.0 : zoo::accuracy(model, test);
  return rep;
}

void write_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json j;
  j["format"] = "gvbsm-eval-report";
  j["model"] = r.model;
  j["accuracy"] = r.accuracy;
  j["test_size"] = r.test_size;
  j["train_size"] = r.train_size;
  j["seed"] = r.seed;
  j["config"] = json::parse(r.config_json);
  j["final_loss"] = r.loss_curve.empty() ? 0.0 : r.loss_curve.back();
  j["loss_curve"] = r.loss_curve;
  util::write_text(dir / "report.json", j.dump(2) + "\n");
  std::ostringstream csv;
  csv.precision(17);
  csv << "epoch,loss\n";
  for (std::size_t e = 0; e < r.loss_curve.size(); ++e) csv << e << ',' << r.loss_curve[e] << '\n';
  util::write_text(dir / "loss.csv", csv.str());
}

EvalReport read_report(const std::filesystem::path& dir) {
  json j;
  try {
    j = json::parse(util::read_text(dir / "report.json"));
  } catch (const json::exception& e) {
    throw FormatError("report.json: " + std::string(e.what()));
  }
  if (j.value("format", "") != "gvbsm-eval-report") throw FormatError("report.json: not an evaluation report");
  EvalReport r;
  r.model = j.at("model").get<std::string>();
  r.accuracy = j.at("accuracy").get<double>();
  r.test_size = j.at("test_size").get<std::size_t>();
  r.train_size = j.at("train_size").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_json = j.at("config").dump();
  r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  return r;
}

DiversityReport diversity_metric(const Array& images, std::span<const int> labels) {
  if (images.rank() != 4 || static_cast<std::size_t>(images.dim(0)) != labels.size()) {
    throw ShapeError("diversity_metric: images " + ad::shape_str(images.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  const std::size_t n = labels.empty() ? 0 : images.size() / labels.size();
  DiversityReport rep;
  for (const auto& [k, idx] : groups) {
    if (idx.size() < 2) continue;
    std::vector<double> norms;
    for (std::size_t i : idx) {
      double s = 0.0;
      for (std::size_t q = 0; q < n; ++q) s += images[i * n + q] * images[i * n + q];
      if (s == 0.0) throw NumericError("diversity_metric: zero image in class " + std::to_string(k));
      norms.push_back(std::sqrt(s));
    }
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < idx.size(); ++a)
      for (std::size_t b = a + 1; b < idx.size(); ++b) {
        double dot = 0.0;
        for (std::size_t q = 0; q < n; ++q) dot += images[idx[a] * n + q] * images[idx[b] * n + q];
        acc += dot / (norms[a] * norms[b]);
        ++pairs;
      }
    std::vector<int> same(idx.size(), k);
    Shape shape = images.shape();
    shape[0] = static_cast<std::int64_t>(idx.size());
    Array sub(shape);
    for (std::size_t a = 0; a < idx.size(); ++a)
      std::copy_n(images.ptr() + idx[a] * n, n, sub.ptr() + a * n);
    const auto spectra = synth::class_spectra(sub, same);
    rep.classes.push_back(k);
    rep.class_cosine.push_back(acc / static_cast<double>(pairs));
    rep.class_min_eigen.push_back(std::max(0.0, spectra.front().front()));
  }
  if (rep.classes.empty()) throw ConfigError("diversity_metric: every class has fewer than 2 images");
  const double m = static_cast<double>(rep.classes.size());
  rep.mean_cosine = std::accumulate(rep.class_cosine.begin(), rep.class_cosine.end(), 0.0) / m;
  rep.mean_min_eigen = std::accumulate(rep.class_min_eigen.begin(), rep.class_min_eigen.end(), 0.0) / m;
  return rep;
}

}  // namespace gvbsm::eval
