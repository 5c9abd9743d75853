/*
 * Copyright 2026 ntklab contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "ntklab/config.hpp"

#include <fstream>

namespace ntklab {

using nlohmann::json;

namespace {

void collect_unknown_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed,
                          std::vector<std::string>& bad) {
  if (!obj.is_object()) return;
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) bad.push_back(where.empty() ? key : where + "." + key);
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

void read_attack(const json& obj, const std::string& where, AttackConfig& out, std::vector<std::string>& bad) {
  collect_unknown_keys(obj, where, {"epsilon", "alpha", "steps", "random_start"}, bad);
  read(obj, "epsilon", out.epsilon);
  read(obj, "alpha", out.alpha);
  read(obj, "steps", out.steps);
  read(obj, "random_start", out.random_start);
}

AttackConfig default_attack_for(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::FgsmAT:
    case StrategyKind::NoiseFgsmAT:
      return AttackConfig::fgsm_default();
    default:
      return AttackConfig::pgd10_train();
  }
}

SaveMode save_mode_from_string(const std::string& s) {
  if (s == "all") return SaveMode::All;
  if (s == "last") return SaveMode::Last;
  if (s == "none") return SaveMode::None;
  throw ValidationError("config: unknown save mode '" + s + "' (all|last|none)");
}

const char* save_mode_name(SaveMode m) {
  switch (m) {
    case SaveMode::All: return "all";
    case SaveMode::Last: return "last";
    case SaveMode::None: return "none";
  }
  return "?";
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  std::vector<std::string> bad;
  collect_unknown_keys(j, "", {"dataset", "model", "train", "probe", "augment", "eval_attack", "artifacts"}, bad);

  ExperimentConfig cfg;
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    collect_unknown_keys(d, "dataset",
                         {"kind", "paths", "test_paths", "train_count", "test_count", "class_count",
                          "per_class_train", "per_class_test", "noise", "modes_per_class", "label_noise",
                          "seed"},
                         bad);
    read(d, "kind", cfg.dataset.kind);
    read(d, "paths", cfg.dataset.paths);
    read(d, "test_paths", cfg.dataset.test_paths);
    read(d, "train_count", cfg.dataset.train_count);
    read(d, "test_count", cfg.dataset.test_count);
    read(d, "class_count", cfg.dataset.class_count);
    read(d, "per_class_train", cfg.dataset.per_class_train);
    read(d, "per_class_test", cfg.dataset.per_class_test);
    read(d, "noise", cfg.dataset.noise);
    read(d, "modes_per_class", cfg.dataset.modes_per_class);
    read(d, "label_noise", cfg.dataset.label_noise);
    read(d, "seed", cfg.dataset.seed);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    collect_unknown_keys(m, "model", {"arch", "n_out", "init", "buffer_mode", "seed"}, bad);
    read(m, "arch", cfg.model.arch);
    read(m, "n_out", cfg.model.n_out);
    if (m.contains("init")) cfg.model.init.kind = init_kind_from_string(m.at("init").get<std::string>());
    if (m.contains("buffer_mode")) {
      const auto s = m.at("buffer_mode").get<std::string>();
      if (s == "with_buffer")
        cfg.model.buffer_mode = BufferMode::WithBuffer;
      else if (s == "without_buffer")
        cfg.model.buffer_mode = BufferMode::WithoutBuffer;
      else
        throw ValidationError("config: unknown buffer_mode '" + s + "'");
    }
    read(m, "seed", cfg.model.seed);
  }
  bool strategy_attack_given = false;
  if (j.contains("train")) {
    const auto& t = j.at("train");
    collect_unknown_keys(t, "train",
                         {"epochs", "batch_size", "lr0", "decay_epochs", "decay_factor", "momentum",
                          "weight_decay", "seed", "probe_interval", "strategy"},
                         bad);
    read(t, "epochs", cfg.train.epochs);
    read(t, "batch_size", cfg.train.batch_size);
    read(t, "lr0", cfg.train.lr0);
    read(t, "decay_epochs", cfg.train.decay_epochs);
    read(t, "decay_factor", cfg.train.decay_factor);
    read(t, "momentum", cfg.train.momentum);
    read(t, "weight_decay", cfg.train.weight_decay);
    read(t, "seed", cfg.train.seed);
    read(t, "probe_interval", cfg.train.probe_interval);
    if (t.contains("strategy")) {
      const auto& s = t.at("strategy");
      collect_unknown_keys(s, "train.strategy",
                           {"variant", "attack", "switch_epoch", "inner", "noise_epsilon", "te"}, bad);
      if (s.contains("variant")) cfg.train.strategy.kind = strategy_from_string(s.at("variant").get<std::string>());
      if (s.contains("inner"))
        cfg.train.strategy.inner_kind = strategy_from_string(s.at("inner").get<std::string>());
      read(s, "switch_epoch", cfg.train.strategy.switch_epoch);
      read(s, "noise_epsilon", cfg.train.strategy.noise_epsilon);
      if (s.contains("attack")) {
        strategy_attack_given = true;
        read_attack(s.at("attack"), "train.strategy.attack", cfg.train.strategy.attack, bad);
      }
      if (s.contains("te")) {
        const auto& te = s.at("te");
        collect_unknown_keys(te, "train.strategy.te", {"ema_momentum", "w_max", "rampup_epochs"}, bad);
        read(te, "ema_momentum", cfg.train.strategy.te.ema_momentum);
        read(te, "w_max", cfg.train.strategy.te.w_max);
        read(te, "rampup_epochs", cfg.train.strategy.te.rampup_epochs);
      }
    }
  }
  if (!strategy_attack_given) {
    const StrategyKind k = cfg.train.strategy.kind == StrategyKind::SwitchAT ? cfg.train.strategy.inner_kind
                                                                             : cfg.train.strategy.kind;
    cfg.train.strategy.attack = default_attack_for(k);
  }
  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    collect_unknown_keys(p, "probe", {"size", "seed"}, bad);
    read(p, "size", cfg.probe.size);
    read(p, "seed", cfg.probe.seed);
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    collect_unknown_keys(a, "augment", {"crop_pad", "flip_prob", "mode"}, bad);
    read(a, "crop_pad", cfg.train.augment.crop_pad);
    read(a, "flip_prob", cfg.train.augment.flip_prob);
    if (a.contains("mode")) {
      const auto s = a.at("mode").get<std::string>();
      if (s == "per_sample")
        cfg.train.augment.mode = AugMode::PerSample;
      else if (s == "batch_shared")
        cfg.train.augment.mode = AugMode::BatchShared;
      else
        throw ValidationError("config: unknown augment mode '" + s + "'");
    }
  }
  if (j.contains("eval_attack")) read_attack(j.at("eval_attack"), "eval_attack", cfg.train.eval_attack, bad);
  if (j.contains("artifacts")) {
    const auto& a = j.at("artifacts");
    collect_unknown_keys(a, "artifacts", {"checkpoints", "kernels"}, bad);
    if (a.contains("checkpoints")) cfg.artifacts.checkpoints = save_mode_from_string(a.at("checkpoints"));
    if (a.contains("kernels")) cfg.artifacts.kernels = save_mode_from_string(a.at("kernels"));
  }

  if (!bad.empty()) {
    std::string msg = "config: unknown key(s):";
    for (const auto& k : bad) msg += " " + k;
    throw ValidationError(msg);
  }

  if (cfg.dataset.kind != "synth" && cfg.dataset.kind != "cifar")
    throw ValidationError("config: dataset.kind must be synth or cifar");
  if (cfg.dataset.kind == "cifar" && cfg.dataset.paths.empty())
    throw ValidationError("config: dataset.paths required for cifar");
  if (cfg.probe.size < 0) throw ValidationError("config: probe.size must be >= 0");
  cfg.train.validate();
  (void)registry_model(cfg.model.arch, cfg.model.n_out);  // arch name must resolve
  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ValidationError("config: " + path + ": " + e.what());
  }
  return config_from_json(j);
}

nlohmann::json ExperimentConfig::echo() const {
  json j;
  j["dataset"] = {{"kind", dataset.kind},
                  {"paths", dataset.paths},
                  {"test_paths", dataset.test_paths},
                  {"train_count", dataset.train_count},
                  {"test_count", dataset.test_count},
                  {"class_count", dataset.class_count},
                  {"per_class_train", dataset.per_class_train},
                  {"per_class_test", dataset.per_class_test},
                  {"noise", dataset.noise},
                  {"modes_per_class", dataset.modes_per_class},
                  {"label_noise", dataset.label_noise},
                  {"seed", dataset.seed}};
  j["model"] = {{"arch", model.arch},
                {"n_out", model.n_out},
                {"init", model.init.kind == InitKind::Uniform
                             ? "uniform"
                             : (model.init.kind == InitKind::Normal ? "normal" : "truncated_normal")},
                {"buffer_mode", model.buffer_mode == BufferMode::WithBuffer ? "with_buffer" : "without_buffer"},
                {"seed", model.seed}};
  json strat = {{"variant", strategy_name(train.strategy.kind)},
                {"attack",
                 {{"epsilon", train.strategy.attack.epsilon},
                  {"alpha", train.strategy.attack.alpha},
                  {"steps", train.strategy.attack.steps},
                  {"random_start", train.strategy.attack.random_start}}},
                {"switch_epoch", train.strategy.switch_epoch},
                {"inner", strategy_name(train.strategy.inner_kind)},
                {"noise_epsilon", train.strategy.noise_epsilon},
                {"te",
                 {{"ema_momentum", train.strategy.te.ema_momentum},
                  {"w_max", train.strategy.te.w_max},
                  {"rampup_epochs", train.strategy.te.rampup_epochs}}}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr0", train.lr0},
                {"decay_epochs", train.decay_epochs},
                {"decay_factor", train.decay_factor},
                {"momentum", train.momentum},
                {"weight_decay", train.weight_decay},
                {"seed", train.seed},
                {"probe_interval", train.probe_interval},
                {"strategy", strat}};
  j["probe"] = {{"size", probe.size}, {"seed", probe.seed}};
  j["augment"] = {{"crop_pad", train.augment.crop_pad},
                  {"flip_prob", train.augment.flip_prob},
                  {"mode", train.augment.mode == AugMode::PerSample ? "per_sample" : "batch_shared"}};
  j["eval_attack"] = {{"epsilon", train.eval_attack.epsilon},
                      {"alpha", train.eval_attack.alpha},
                      {"steps", train.eval_attack.steps},
                      {"random_start", train.eval_attack.random_start}};
  j["artifacts"] = {{"checkpoints", save_mode_name(artifacts.checkpoints)},
                    {"kernels", save_mode_name(artifacts.kernels)}};
  return j;
}

DataSplits load_datasets(const DatasetConfig& cfg) {
  DataSplits out;
  if (cfg.kind == "cifar") {
    out.train = load_cifar_binary_files(cfg.paths);
    if (!cfg.test_paths.empty()) {
      out.test = load_cifar_binary_files(cfg.test_paths);
    } else {
      out.test = out.train;  // callers should pass test_paths; fallback reuses train files
    }
  } else {
    SynthSpec train_spec;
    train_spec.class_count = cfg.class_count;
    train_spec.per_class = cfg.per_class_train;
    train_spec.noise = cfg.noise;
    train_spec.modes_per_class = cfg.modes_per_class;
    train_spec.label_noise = cfg.label_noise;
    train_spec.proto_seed = cfg.seed;
    train_spec.draw_seed = cfg.seed * 2 + 1;
    out.train = synth_dataset(train_spec);
    SynthSpec test_spec = train_spec;
    test_spec.per_class = cfg.per_class_test;
    test_spec.label_noise = 0.0;  // held-out labels stay clean
    test_spec.draw_seed = cfg.seed * 2 + 2;
    out.test = synth_dataset(test_spec);
  }
  if (cfg.train_count > 0 && cfg.train_count < out.train.size())
    out.train = out.train.balanced_head(cfg.train_count);
  if (cfg.test_count > 0 && cfg.test_count < out.test.size())
    out.test = out.test.balanced_head(cfg.test_count);
  return out;
}

}  // namespace ntklab
