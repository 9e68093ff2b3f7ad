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
#include "gvbsm/pipeline/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "gvbsm/error.hpp"
#include "gvbsm/stats/stat_bank.hpp"
#include "gvbsm/util/binio.hpp"
#include "gvbsm/util/hash.hpp"

namespace gvbsm::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Reads keys of one JSON object into fields and rejects anything left over.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      field = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: '" + where(key) + "' has the wrong type (" + j_.at(key).dump() + ")");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + where(k) + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

json to_json(const PipelineConfig& c) {
  const auto& s = c.synthesis.config;
  const auto& e = c.eval.config;
  json j;
  j["dataset"] = {{"name", c.dataset.name},
                  {"train_per_class", c.dataset.train_per_class},
                  {"test_per_class", c.dataset.test_per_class},
                  {"path", c.dataset.path},
                  {"test_path", c.dataset.test_path}};
  j["pool"] = c.pool;
  j["pretrain"] = {{"epochs", c.pretrain.epochs},       {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},               {"momentum", c.pretrain.momentum},
                   {"weight_decay", c.pretrain.weight_decay}, {"bn_momentum", c.pretrain.bn_momentum},
                   {"crop_pad", c.pretrain.crop_pad}};
  j["capture"] = {{"n_p", c.capture.n_p}, {"batch_size", c.capture.batch_size}};
  j["synthesis"] = {{"ipc", c.synthesis.ipc},
                    {"init", c.synthesis.init},
                    {"pool", c.synthesis.pool},
                    {"iterations", s.iterations},
                    {"lr", s.lr},
                    {"beta1", s.beta1},
                    {"beta2", s.beta2},
                    {"adam_eps", s.adam_eps},
                    {"cosine_lr", s.cosine_lr},
                    {"alpha", s.alpha},
                    {"tau_dd", s.tau_dd},
                    {"beta_dr", s.beta_dr},
                    {"w_ce", s.w_ce},
                    {"w_bn", s.w_bn},
                    {"w_conv", s.w_conv},
                    {"w_dd", s.w_dd},
                    {"plan", synth::plan_mode_name(s.plan)},
                    {"batch_size", s.batch_size}};
  j["relabel"] = {{"epochs", c.relabel.epochs},     {"ln", c.relabel.ln},
                  {"ln_scope", c.relabel.ln_scope}, {"tau_label", c.relabel.tau_label},
                  {"crop_pad", c.relabel.crop_pad}, {"batch_size", c.relabel.batch_size},
                  {"pool", c.relabel.pool}};
  j["eval"] = {{"model", e.model},       {"epochs", e.epochs},       {"lr", e.lr},
               {"beta1", e.beta1},       {"beta2", e.beta2},         {"adam_eps", e.adam_eps},
               {"weight_decay", e.weight_decay}, {"batch_size", e.batch_size}, {"bn_momentum", e.bn_momentum}};
  j["eval"]["gamma"] = c.eval.gamma ? json(*c.eval.gamma) : json(nullptr);
  j["paths"] = {{"models", c.paths.models},
                {"banks", c.paths.banks},
                {"distilled", c.paths.distilled},
                {"labels", c.paths.labels},
                {"eval", c.paths.eval}};
  j["seed"] = c.seed;
  j["out"] = c.out;
  return j;
}

PipelineConfig from_json(const json& j) {
  PipelineConfig c;
  Section root(j, "");
  if (const json* d = root.child("dataset")) {
    Section s(*d, "dataset");
    s.get("name", c.dataset.name);
    s.get("train_per_class", c.dataset.train_per_class);
    s.get("test_per_class", c.dataset.test_per_class);
    s.get("path", c.dataset.path);
    s.get("test_path", c.dataset.test_path);
    s.finish();
  }
  root.get("pool", c.pool);
  if (const json* d = root.child("pretrain")) {
    Section s(*d, "pretrain");
    s.get("epochs", c.pretrain.epochs);
    s.get("batch_size", c.pretrain.batch_size);
    s.get("lr", c.pretrain.lr);
    s.get("momentum", c.pretrain.momentum);
    s.get("weight_decay", c.pretrain.weight_decay);
    s.get("bn_momentum", c.pretrain.bn_momentum);
    s.get("crop_pad", c.pretrain.crop_pad);
    s.finish();
  }
  if (const json* d = root.child("capture")) {
    Section s(*d, "capture");
    s.get("n_p", c.capture.n_p);
    s.get("batch_size", c.capture.batch_size);
    s.finish();
  }
  if (const json* d = root.child("synthesis")) {
    Section s(*d, "synthesis");
    auto& k = c.synthesis.config;
    s.get("ipc", c.synthesis.ipc);
    s.get("init", c.synthesis.init);
    s.get("pool", c.synthesis.pool);
    s.get("iterations", k.iterations);
    s.get("lr", k.lr);
    s.get("beta1", k.beta1);
    s.get("beta2", k.beta2);
    s.get("adam_eps", k.adam_eps);
    s.get("cosine_lr", k.cosine_lr);
    s.get("alpha", k.alpha);
    s.get("tau_dd", k.tau_dd);
    s.get("beta_dr", k.beta_dr);
    s.get("w_ce", k.w_ce);
    s.get("w_bn", k.w_bn);
    s.get("w_conv", k.w_conv);
    s.get("w_dd", k.w_dd);
    std::string plan = synth::plan_mode_name(k.plan);
    s.get("plan", plan);
    k.plan = synth::parse_plan_mode(plan);
    s.get("batch_size", k.batch_size);
    s.finish();
  }
  if (const json* d = root.child("relabel")) {
    Section s(*d, "relabel");
    s.get("epochs", c.relabel.epochs);
    s.get("ln", c.relabel.ln);
    s.get("ln_scope", c.relabel.ln_scope);
    s.get("tau_label", c.relabel.tau_label);
    s.get("crop_pad", c.relabel.crop_pad);
    s.get("batch_size", c.relabel.batch_size);
    s.get("pool", c.relabel.pool);
    s.finish();
  }
  if (const json* d = root.child("eval")) {
    Section s(*d, "eval");
    auto& k = c.eval.config;
    s.get("model", k.model);
    s.get("epochs", k.epochs);
    s.get("lr", k.lr);
    s.get("beta1", k.beta1);
    s.get("beta2", k.beta2);
    s.get("adam_eps", k.adam_eps);
    s.get("weight_decay", k.weight_decay);
    s.get("batch_size", k.batch_size);
    s.get("bn_momentum", k.bn_momentum);
    if (const json* g = s.child("gamma")) {
      if (g->is_number()) {
        c.eval.gamma = g->get<double>();
      } else if (!g->is_null()) {
        throw ConfigError("config: 'eval.gamma' must be a number or null");
      }
    }
    s.finish();
  }
  if (const json* d = root.child("paths")) {
    Section s(*d, "paths");
    s.get("models", c.paths.models);
    s.get("banks", c.paths.banks);
    s.get("distilled", c.paths.distilled);
    s.get("labels", c.paths.labels);
    s.get("eval", c.paths.eval);
    s.finish();
  }
  root.get("seed", c.seed);
  root.get("out", c.out);
  root.finish();
  c.validate();
  return c;
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::vector<std::string> subset_or_pool(const std::vector<std::string>& subset, const std::vector<std::string>& pool) {
  return subset.empty() ? pool : subset;
}

fs::path dir_of(const PipelineConfig& c, const std::string& rel) { return fs::path(c.out) / rel; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string hex(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << h;
  return s.str();
}

json fingerprint_json(const data::Fingerprint& f) {
  return {{"size", f.size}, {"classes", f.classes}, {"hash", hex(f.content_hash)}};
}

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

struct StageRecord {
  std::string stage;
  json fingerprint;
  json inputs = json::object();
  json outputs = json::object();
  json summary = json::object();
};

void write_stage(const PipelineConfig& cfg, const fs::path& dir, const StageRecord& r, double elapsed) {
  json j = {{"stage", r.stage},           {"seed", cfg.seed},       {"dataset", r.fingerprint},
            {"inputs", r.inputs},         {"outputs", r.outputs},   {"summary", r.summary}};
  util::write_text(dir / "stage.json", j.dump(2) + "\n");
  j["config"] = to_json(cfg);
  j["elapsed_s"] = elapsed;
  fs::create_directories(cfg.out);
  std::ofstream logf(fs::path(cfg.out) / "run.log", std::ios::app);
  if (!logf) throw Error(ErrorKind::kInvalidArgument, "cannot append to " + (fs::path(cfg.out) / "run.log").string());
  logf << j.dump() << '\n';
}

// Reads a predecessor's stage.json and checks its dataset fingerprint and the
// current content of every artifact it produced.
json require_stage(const fs::path& dir, const std::string& producer, const std::string& consumer,
                   const data::Fingerprint& fp) {
  if (!fs::exists(dir / "stage.json")) {
    throw MissingArtifactError(consumer + ": no " + producer + " output under " + dir.string() + "; run " + producer +
                               " first");
  }
  json j;
  try {
    j = json::parse(util::read_text(dir / "stage.json"));
  } catch (const json::exception& e) {
    throw FormatError((dir / "stage.json").string() + ": " + e.what());
  }
  if (j.at("dataset") != fingerprint_json(fp)) {
    throw ConfigError(consumer + ": dataset fingerprint mismatch; " + producer + " output in " + dir.string() +
                      " was built from " + j.at("dataset").dump() + ", current dataset is " +
                      fingerprint_json(fp).dump());
  }
  for (const auto& [name, h] : j.at("outputs").items()) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) {
      throw MissingArtifactError(consumer + ": " + p.string() + " is missing; rerun " + producer);
    }
    if (hex(artifact_hash(p)) != h.get<std::string>()) {
      throw FormatError(consumer + ": " + p.string() + " changed since " + producer + " wrote it");
    }
  }
  return j;
}

std::vector<zoo::Model> load_pool(const PipelineConfig& cfg, const std::vector<std::string>& names,
                                  const std::string& consumer, const data::Fingerprint& fp, json& inputs) {
  const fs::path dir = dir_of(cfg, cfg.paths.models);
  const json st = require_stage(dir, "pretrain", consumer, fp);
  std::vector<zoo::Model> out;
  for (const auto& n : names) {
    if (!st.at("outputs").contains(n)) {
      throw MissingArtifactError(consumer + ": backbone " + n + " was not pretrained in " + dir.string() +
                                 "; run pretrain first");
    }
    out.push_back(zoo::load_model(dir / n));
    inputs["models/" + n] = st.at("outputs").at(n);
  }
  return out;
}

synth::SyntheticDataset load_distilled(const PipelineConfig& cfg, const std::string& consumer,
                                       const data::Fingerprint& fp, json& inputs) {
  const fs::path dir = dir_of(cfg, cfg.paths.distilled);
  const json st = require_stage(dir, "synthesize", consumer, fp);
  auto s = synth::load_synthetic(dir);
  inputs["distilled"] = hex(synth::synthetic_hash(s));
  return s;
}

}  // namespace

void PipelineConfig::validate() const {
  if (pool.empty()) throw ConfigError("config: pool must not be empty");
  for (const auto& n : pool) {
    const auto names = zoo::builtin_names();
    if (!contains(names, n)) throw ConfigError("config: unknown backbone '" + n + "' in pool");
  }
  if (std::set<std::string>(pool.begin(), pool.end()).size() != pool.size()) {
    throw ConfigError("config: pool lists a backbone twice");
  }
  for (const auto* sub : {&synthesis.pool, &relabel.pool}) {
    for (const auto& n : *sub) {
      if (!contains(pool, n)) throw ConfigError("config: backbone '" + n + "' is not in the pool");
    }
  }
  if (dataset.train_per_class < 1 || dataset.test_per_class < 0) {
    throw ConfigError("config: dataset.train_per_class must be >= 1 and test_per_class >= 0");
  }
  if (pretrain.epochs < 1 || pretrain.batch_size < 1 || !(pretrain.lr > 0.0) || pretrain.crop_pad < 0) {
    throw ConfigError("config: pretrain needs epochs, batch_size and lr > 0 and crop_pad >= 0");
  }
  if (capture.n_p < 0 || capture.batch_size < 1) throw ConfigError("config: capture.n_p >= 0, batch_size >= 1");
  if (synthesis.ipc < 1) throw ConfigError("config: synthesis.ipc must be >= 1");
  synth::parse_init_mode(synthesis.init);
  synthesis.config.validate();
  if (relabel.epochs < 0 || relabel.crop_pad < 0 || relabel.batch_size < 0 || !(relabel.tau_label > 0.0)) {
    throw ConfigError("config: relabel epochs, crop_pad, batch_size >= 0 and tau_label > 0");
  }
  relabel::parse_ln_scope(relabel.ln_scope);
  eval.config.validate();
  if (eval.gamma && !(*eval.gamma >= 0.0)) throw ConfigError("config: eval.gamma must be >= 0");
  if (!contains(zoo::builtin_names(), eval.config.model)) {
    throw ConfigError("config: unknown evaluation model '" + eval.config.model + "'");
  }
  if (out.empty()) throw ConfigError("config: out must not be empty");
}

PipelineConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  return from_json(j);
}

std::string config_to_json(const PipelineConfig& cfg) { return to_json(cfg).dump(2); }

PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  return config_from_json(util::read_text(path));
}

void set_key(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  json j = to_json(cfg);
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("config: empty key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw ConfigError("config: unknown key '" + key + "'");
    node = &(*node)[parts[i]];
  }
  if (!node->is_object() || !node->contains(parts.back())) throw ConfigError("config: unknown key '" + key + "'");
  json v;
  try {
    v = json::parse(value);
  } catch (const json::exception&) {
    v = value;
  }
  (*node)[parts.back()] = v;
  cfg = from_json(j);
}

double resolved_gamma(const PipelineConfig& cfg) {
  if (cfg.eval.gamma) return *cfg.eval.gamma;
  return cfg.dataset.name == "digits-16" || cfg.dataset.name == "cifar-subset" ? 0.15 : 0.1;
}

std::uint64_t StageSeeds::pretrain(const std::string& backbone) const {
  return util::derive_seed(master, "pretrain/" + backbone);
}

StageSeeds stage_seeds(std::uint64_t master) {
  StageSeeds s{};
  s.master = master;
  s.dataset = util::derive_seed(master, "dataset");
  s.capture = util::derive_seed(master, "capture");
  s.synthesis = util::derive_seed(master, "synthesize");
  s.relabel = util::derive_seed(master, "relabel");
  s.eval = util::derive_seed(master, "evaluate");
  return s;
}

data::Splits load_dataset(const PipelineConfig& cfg) {
  data::ToyOptions opt;
  opt.name = cfg.dataset.name;
  opt.seed = stage_seeds(cfg.seed).dataset;
  opt.train_per_class = cfg.dataset.train_per_class;
  opt.test_per_class = cfg.dataset.test_per_class;
  opt.path = cfg.dataset.path;
  opt.test_path = cfg.dataset.test_path;
  return data::make_dataset(opt);
}

std::uint64_t artifact_hash(const fs::path& path) {
  if (fs::is_regular_file(path)) return util::fnv1a(util::read_file(path));
  if (!fs::is_directory(path)) throw MissingArtifactError("no artifact at " + path.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (e.is_regular_file() && e.path().filename() != "stage.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = util::hash_string("dir");
  for (const auto& f : files) {
    h = util::hash_string(fs::relative(f, path).generic_string(), h);
    h = util::fnv1a(util::read_file(f), h);
  }
  return h;
}

StageResult run_pretrain(const PipelineConfig& cfg, const Logger& log) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto splits = load_dataset(cfg);
  const auto seeds = stage_seeds(cfg.seed);
  const fs::path dir = dir_of(cfg, cfg.paths.models);
  fs::create_directories(dir);
  const auto& ds = splits.train;

  std::vector<std::unique_ptr<zoo::Model>> models(cfg.pool.size());
  std::vector<zoo::PretrainResult> results(cfg.pool.size());
  std::vector<std::exception_ptr> errors(cfg.pool.size());
  auto train_one = [&](std::size_t i) {
    try {
      const auto& name = cfg.pool[i];
      const std::uint64_t s = seeds.pretrain(name);
      models[i] = std::make_unique<zoo::Model>(
          zoo::builtin_spec(name, ds.channels(), ds.height(), ds.width(), ds.classes), util::derive_seed(s, "init"));
      zoo::PretrainConfig pc;
      pc.epochs = cfg.pretrain.epochs;
      pc.batch_size = cfg.pretrain.batch_size;
      pc.lr = cfg.pretrain.lr;
      pc.momentum = cfg.pretrain.momentum;
      pc.weight_decay = cfg.pretrain.weight_decay;
      pc.bn_momentum = cfg.pretrain.bn_momentum;
      pc.crop_pad = cfg.pretrain.crop_pad;
      pc.seed = s;
      results[i] = zoo::pretrain(*models[i], ds, pc);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t lanes = std::max<std::size_t>(1, std::min<std::size_t>(cfg.pool.size(), std::thread::hardware_concurrency()));
  for (std::size_t start = 0; start < cfg.pool.size(); start += lanes) {
    std::vector<std::thread> threads;
    for (std::size_t i = start; i < std::min(cfg.pool.size(), start + lanes); ++i) threads.emplace_back(train_one, i);
    for (auto& t : threads) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  StageRecord rec;
  rec.stage = "pretrain";
  rec.fingerprint = fingerprint_json(data::fingerprint(ds));
  for (std::size_t i = 0; i < cfg.pool.size(); ++i) {
    const auto& name = cfg.pool[i];
    zoo::save_model(*models[i], dir / name);
    rec.outputs[name] = hex(artifact_hash(dir / name));
    const double test_acc = splits.test.size() ? zoo::accuracy(*models[i], splits.test) : 0.0;
    rec.summary[name] = {{"train_accuracy", results[i].train_accuracy},
                         {"test_accuracy", test_acc},
                         {"parameters", models[i]->parameter_count()}};
    std::ostringstream msg;
    msg.precision(3);
    msg << "[pretrain] " << name << ": train acc " << results[i].train_accuracy << ", test acc " << test_acc;
    say(log, msg.str());
  }
  write_stage(cfg, dir, rec, seconds_since(t0));
  return {"pretrain", rec.summary.dump()};
}

StageResult run_capture(const PipelineConfig& cfg, const Logger& log) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto splits = load_dataset(cfg);
  const auto fp = data::fingerprint(splits.train);
  StageRecord rec;
  rec.stage = "capture-stats";
  rec.fingerprint = fingerprint_json(fp);
  const auto models = load_pool(cfg, cfg.pool, "capture-stats", fp, rec.inputs);
  const fs::path dir = dir_of(cfg, cfg.paths.banks);
  fs::create_directories(dir);
  for (std::size_t i = 0; i < models.size(); ++i) {
    stats::CaptureOptions opt;
    opt.n_p = cfg.capture.n_p;
    opt.batch_size = cfg.capture.batch_size;
    const auto bank = stats::capture_stats(models[i], splits.train, opt);
    stats::save_bank(bank, dir / cfg.pool[i]);
    rec.outputs[cfg.pool[i]] = hex(artifact_hash(dir / cfg.pool[i]));
    rec.summary[cfg.pool[i]] = {{"layers", bank.layers.size()}, {"n_p", bank.n_p}, {"batches", bank.batches}};
    say(log, "[capture-stats] " + cfg.pool[i] + ": " + std::to_string(bank.layers.size()) + " layers, n_p " +
                 std::to_string(bank.n_p));
  }
  write_stage(cfg, dir, rec, seconds_since(t0));
  return {"capture-stats", rec.summary.dump()};
}

StageResult run_synthesize(const PipelineConfig& cfg, const Logger& log) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto splits = load_dataset(cfg);
  const auto fp = data::fingerprint(splits.train);
  const auto seeds = stage_seeds(cfg.seed);
  StageRecord rec;
  rec.stage = "synthesize";
  rec.fingerprint = fingerprint_json(fp);
  const auto names = subset_or_pool(cfg.synthesis.pool, cfg.pool);

  const fs::path bank_dir = dir_of(cfg, cfg.paths.banks);
  const json bank_stage = require_stage(bank_dir, "capture-stats", "synthesize", fp);
  const auto models = load_pool(cfg, names, "synthesize", fp, rec.inputs);
  std::vector<stats::StatBank> banks;
  for (const auto& n : names) {
    if (!bank_stage.at("outputs").contains(n)) {
      throw MissingArtifactError("synthesize: no stat bank for " + n + " in " + bank_dir.string() +
                                 "; run capture-stats first");
    }
    std::vector<std::string> warnings;
    stats::LoadExpectations expect{n, &fp};
    banks.push_back(stats::load_bank(bank_dir / n, expect, &warnings));
    for (const auto& w : warnings) say(log, "[synthesize] warning: " + w);
    rec.inputs["banks/" + n] = bank_stage.at("outputs").at(n);
  }
  std::vector<const zoo::Model*> pool;
  std::vector<const stats::StatBank*> bank_ptrs;
  for (std::size_t i = 0; i < models.size(); ++i) {
    pool.push_back(&models[i]);
    bank_ptrs.push_back(&banks[i]);
  }
  auto init = synth::init_synthetic(splits.train, cfg.synthesis.ipc, synth::parse_init_mode(cfg.synthesis.init),
                                    seeds.synthesis);
  auto scfg = cfg.synthesis.config;
  scfg.seed = seeds.synthesis;
  synth::SynthesisTrace trace;
  const int report_every = std::max(1, scfg.iterations / 4);
  const auto progress = [&](std::size_t batch, int it, const synth::LossBreakdown& b) {
    if ((it + 1) % report_every != 0) return;
    std::ostringstream msg;
    msg.precision(4);
    msg << "[synthesize] batch " << batch << " iter " << it + 1 << "/" << scfg.iterations << ": total " << b.total
        << " ce " << b.ce << " bn " << b.bn << " conv " << b.conv << " dd " << b.dd;
    say(log, msg.str());
  };
  const auto out = synth::run_synthesis(pool, bank_ptrs, std::move(init), scfg, &trace, progress);
  const fs::path dir = dir_of(cfg, cfg.paths.distilled);
  fs::create_directories(dir);
  synth::save_synthetic(out, dir);
  rec.outputs["images.bin"] = hex(artifact_hash(dir / "images.bin"));
  rec.outputs["labels.bin"] = hex(artifact_hash(dir / "labels.bin"));
  rec.outputs["manifest"] = hex(artifact_hash(dir / "manifest"));
  rec.summary = {{"images", out.size()}, {"hash", hex(synth::synthetic_hash(out))}, {"draws", trace.draws}};
  if (out.ipc >= 2) {
    const auto div = eval::diversity_metric(out);
    rec.summary["mean_cosine"] = div.mean_cosine;
    rec.summary["mean_min_eigen"] = div.mean_min_eigen;
  }
  say(log, "[synthesize] wrote " + std::to_string(out.size()) + " images to " + dir.string());
  write_stage(cfg, dir, rec, seconds_since(t0));
  return {"synthesize", rec.summary.dump()};
}

StageResult run_relabel(const PipelineConfig& cfg, const Logger& log) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto splits = load_dataset(cfg);
  const auto fp = data::fingerprint(splits.train);
  StageRecord rec;
  rec.stage = "relabel";
  rec.fingerprint = fingerprint_json(fp);
  const auto s = load_distilled(cfg, "relabel", fp, rec.inputs);
  const auto names = subset_or_pool(cfg.relabel.pool, cfg.pool);
  const auto models = load_pool(cfg, names, "relabel", fp, rec.inputs);
  std::vector<const zoo::Model*> pool;
  for (const auto& m : models) pool.push_back(&m);
  relabel::RelabelConfig rc;
  rc.epochs = cfg.relabel.epochs > 0 ? cfg.relabel.epochs : cfg.eval.config.epochs;
  rc.seed = stage_seeds(cfg.seed).relabel;
  rc.tau_label = cfg.relabel.tau_label;
  rc.ensemble.use_ln = cfg.relabel.ln;
  rc.ensemble.scope = relabel::parse_ln_scope(cfg.relabel.ln_scope);
  rc.crop_pad = cfg.relabel.crop_pad;
  rc.flip = splits.train.flip_invariant;
  rc.batch_size = cfg.relabel.batch_size > 0 ? cfg.relabel.batch_size : (s.size() <= 100 ? static_cast<int>(s.size()) : 64);
  std::vector<std::string> warnings;
  const auto store = relabel::relabel_dataset(s, pool, rc, &warnings);
  for (const auto& w : warnings) say(log, "[relabel] warning: " + w);
  const fs::path dir = dir_of(cfg, cfg.paths.labels);
  fs::create_directories(dir);
  relabel::save_store(store, dir / "soft_labels.gvsl");
  rec.outputs["soft_labels.gvsl"] = hex(artifact_hash(dir / "soft_labels.gvsl"));
  rec.summary = {{"records", store.records.size()}, {"epochs", store.epochs}, {"ln", store.use_ln},
                 {"backbones", names}, {"warnings", warnings.size()}};
  say(log, "[relabel] " + std::to_string(store.records.size()) + " records over " + std::to_string(store.epochs) +
               " epochs from " + std::to_string(names.size()) + " backbone(s)");
  write_stage(cfg, dir, rec, seconds_since(t0));
  return {"relabel", rec.summary.dump()};
}

StageResult run_evaluate(const PipelineConfig& cfg, const Logger& log) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto splits = load_dataset(cfg);
  const auto fp = data::fingerprint(splits.train);
  StageRecord rec;
  rec.stage = "evaluate";
  rec.fingerprint = fingerprint_json(fp);
  const auto s = load_distilled(cfg, "evaluate", fp, rec.inputs);
  const fs::path label_dir = dir_of(cfg, cfg.paths.labels);
  const json label_stage = require_stage(label_dir, "relabel", "evaluate", fp);
  if (label_stage.at("inputs").value("distilled", "") != rec.inputs.at("distilled")) {
    throw ConfigError("evaluate: soft labels in " + label_dir.string() +
                      " were generated for a different distilled set; rerun relabel");
  }
  const auto store = relabel::load_store(label_dir / "soft_labels.gvsl");
  rec.inputs["soft_labels"] = label_stage.at("outputs").at("soft_labels.gvsl");
  auto ec = cfg.eval.config;
  ec.gamma = resolved_gamma(cfg);
  ec.seed = stage_seeds(cfg.seed).eval;
  const auto report = eval::train_eval_model(s, store, splits.test, ec);
  const fs::path dir = dir_of(cfg, cfg.paths.eval);
  eval::write_report(report, dir);
  rec.outputs["report.json"] = hex(artifact_hash(dir / "report.json"));
  rec.outputs["loss.csv"] = hex(artifact_hash(dir / "loss.csv"));
  rec.summary = {{"model", report.model}, {"accuracy", report.accuracy}, {"gamma", ec.gamma}};
  std::ostringstream msg;
  msg.precision(4);
  msg << "[evaluate] " << report.model << ": test accuracy " << report.accuracy << " on " << report.test_size
      << " images";
  say(log, msg.str());
  write_stage(cfg, dir, rec, seconds_since(t0));
  return {"evaluate", rec.summary.dump()};
}

StageResult run_stage(const PipelineConfig& cfg, const std::string& stage, const Logger& log) {
  if (stage == "pretrain") return run_pretrain(cfg, log);
  if (stage == "capture-stats") return run_capture(cfg, log);
  if (stage == "synthesize") return run_synthesize(cfg, log);
  if (stage == "relabel") return run_relabel(cfg, log);
  if (stage == "evaluate") return run_evaluate(cfg, log);
  throw ConfigError("unknown stage '" + stage + "'");
}

eval::EvalReport run_pipeline(const PipelineConfig& cfg, const Logger& log) {
  for (const char* st : {"pretrain", "capture-stats", "synthesize", "relabel", "evaluate"}) run_stage(cfg, st, log);
  return eval::read_report(dir_of(cfg, cfg.paths.eval));
}

std::string diag_json(const fs::path& distilled_dir) {
  const auto s = synth::load_synthetic(distilled_dir);
  const auto d = eval::diversity_metric(s);
  json j = {{"images", s.size()},
            {"ipc", s.ipc},
            {"classes", d.classes},
            {"class_cosine", d.class_cosine},
            {"class_min_eigen", d.class_min_eigen},
            {"mean_cosine", d.mean_cosine},
            {"mean_min_eigen", d.mean_min_eigen}};
  return j.dump(2);
}

PipelineConfig config_from_log(const fs::path& run_log) {
  const std::string text = util::read_text(run_log);
  std::istringstream in(text);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  if (last.empty()) throw FormatError(run_log.string() + ": empty run log");
  try {
    return from_json(json::parse(last).at("config"));
  } catch (const json::exception& e) {
    throw FormatError(run_log.string() + ": " + e.what());
  }
}

}  // namespace gvbsm::pipeline
