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
#include "ntklab/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace ntklab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string epoch_tag(int epoch) {
  if (epoch < 0) return "init";
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", epoch);
  return buf;
}

void write_json(const json& j, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
}

}  // namespace

RunResult cmd_train(const ExperimentConfig& cfg, const std::string& out_dir, bool verbose) {
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/checkpoints");
  fs::create_directories(out_dir + "/kernels");

  const auto splits = load_datasets(cfg.dataset);
  ProbeSet probe;
  if (cfg.probe.size > 0 && cfg.train.probe_interval > 0) {
    probe = sample_probe(splits.train, cfg.probe.size, cfg.probe.seed);
  }

  write_json(cfg.echo(), out_dir + "/config.json");
  {
    std::ofstream seed_file(out_dir + "/seed.txt", std::ios::trunc);
    seed_file << "train_seed " << cfg.train.seed << "\nmodel_seed " << cfg.model.seed << "\nprobe_seed "
              << cfg.probe.seed << "\ndataset_seed " << cfg.dataset.seed << "\nworkers " << worker_count()
              << "\n";
  }

  const int last_epoch = cfg.train.epochs - 1;
  RunHooks hooks;
  hooks.on_epoch = [&](const EpochArtifacts& art) {
    const bool is_last = art.epoch == last_epoch;
    const auto tag = epoch_tag(art.epoch);
    const bool save_ckpt = cfg.artifacts.checkpoints == SaveMode::All ||
                           (cfg.artifacts.checkpoints == SaveMode::Last && is_last);
    if (save_ckpt) save_checkpoint(*art.model, out_dir + "/checkpoints/epoch_" + tag + ".ckpt");
    const bool save_k = art.clean_kernel != nullptr &&
                        (cfg.artifacts.kernels == SaveMode::All ||
                         (cfg.artifacts.kernels == SaveMode::Last && is_last));
    if (save_k) {
      save_kernel_snapshot(*art.clean_kernel, out_dir + "/kernels/epoch_" + tag + "_clean.entk");
      save_kernel_snapshot(*art.adv_kernel, out_dir + "/kernels/epoch_" + tag + "_adv.entk");
    }
  };
  if (verbose) {
    hooks.log = [](int, const std::string& line) { std::cout << line << std::endl; };
  }

  const auto spec = registry_model(cfg.model.arch, cfg.model.n_out);
  auto result = run_training(spec, cfg.model.init, cfg.model.buffer_mode, cfg.model.seed, cfg.train,
                             splits.train, splits.test, probe, hooks);
  write_trace_csv(result.trace, out_dir + "/trace.csv");
  return result;
}

double cmd_metrics_kd(const std::string& path_a, const std::string& path_b) {
  const auto a = load_kernel_snapshot(path_a);
  const auto b = load_kernel_snapshot(path_b);
  if (a.probe_ids != b.probe_ids)
    throw ValidationError("kd: snapshots use different probe indices; kernels are not comparable");
  return kernel_distance(traced_kernel(a).matrix, traced_kernel(b).matrix);
}

double cmd_metrics_ker(const std::string& path) {
  return effective_rank(traced_kernel(load_kernel_snapshot(path)).matrix);
}

double cmd_metrics_ks(const std::string& path, LabelSource source) {
  return kernel_specialization(ks_matrix(load_kernel_snapshot(path), source));
}

Thm1Summary cmd_check_thm1(const ExperimentConfig& cfg, const std::string& out_dir,
                           const std::vector<double>& epsilons, int trials, int probe_size) {
  fs::create_directories(out_dir);
  const auto splits = load_datasets(cfg.dataset);
  const auto probe = sample_probe(splits.train, probe_size, cfg.probe.seed);
  const auto spec = registry_model(cfg.model.arch, cfg.model.n_out);
  const auto state = build_model<double>(spec, cfg.model.init, cfg.model.seed, cfg.model.buffer_mode);
  const Tensor<double> probe_x = splits.train.gather(probe.indices).cast<double>();
  const auto labels = splits.train.gather_labels(probe.indices);

  Thm1Summary out;
  out.report = theorem1_shift(state, probe_x, labels, epsilons, trials, cfg.train.seed);

  const auto means = out.report.mean_shifts();
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    if (epsilons[i] == 0.0) out.r_zero = means[i];
  }
  for (std::size_t i = 1; i < means.size(); ++i) {
    if (means[i] < means[i - 1]) out.monotone = false;  // grid is expected sorted ascending
  }

  std::ofstream csv(out_dir + "/thm1.csv", std::ios::trunc);
  csv << "epsilon,trial,relative_shift,coupled_shift\n";
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (std::size_t e = 0; e < epsilons.size(); ++e) {
    for (std::size_t t = 0; t < out.report.shifts[e].size(); ++t) {
      csv << num(epsilons[e]) << ',' << t << ',' << num(out.report.shifts[e][t]) << ','
          << num(out.report.coupled_shifts[e]) << "\n";
    }
  }
  csv.close();

  json summary;
  summary["epsilons"] = epsilons;
  summary["mean_shifts"] = means;
  summary["coupled_shifts"] = out.report.coupled_shifts;
  summary["r_zero"] = out.r_zero;
  summary["monotone"] = out.monotone;
  summary["loglog_slope"] = out.report.loglog_slope;
  summary["trials"] = trials;
  summary["probe_size"] = probe_size;
  summary["arch"] = cfg.model.arch;
  write_json(summary, out_dir + "/thm1.json");
  return out;
}

Thm2Report cmd_check_thm2(const std::string& out_dir, FKind f_kind, int alpha, int k, int trials,
                          std::uint64_t seed, AVariant variant) {
  fs::create_directories(out_dir);
  const auto report = theorem2_check(f_kind, alpha, k, trials, seed, variant);
  const std::string stem = std::string("thm2_") + (f_kind == FKind::Identity ? "identity" : "tanh") + "_" +
                           (variant == AVariant::ProofConsistent ? "proof" : "statement");
  std::ofstream csv(out_dir + "/" + stem + ".csv", std::ios::trunc);
  csv << "trial,margin_min,lhs_max,infeasible\n";
  char buf[32];
  for (std::size_t t = 0; t < report.trials.size(); ++t) {
    const auto& tr = report.trials[t];
    std::snprintf(buf, sizeof buf, "%.17g", tr.margin_min);
    csv << t << ',' << buf << ',';
    std::snprintf(buf, sizeof buf, "%.17g", tr.lhs_max);
    csv << buf << ',' << (tr.infeasible ? 1 : 0) << "\n";
  }
  csv.close();

  json summary;
  summary["f"] = f_kind == FKind::Identity ? "identity" : "tanh";
  summary["variant"] = variant == AVariant::ProofConsistent ? "proof_consistent" : "statement";
  summary["alpha"] = alpha;
  summary["k"] = k;
  summary["trials"] = trials;
  summary["violations"] = report.violations;
  summary["infeasible"] = report.infeasible_count;
  write_json(summary, out_dir + "/" + stem + ".json");
  return report;
}

BufferSwapReport cmd_check_bn_buffer(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                                     const std::string& out_dir) {
  fs::create_directories(out_dir);
  const auto splits = load_datasets(cfg.dataset);
  const auto spec = registry_model(cfg.model.arch, cfg.model.n_out);
  const auto model = load_checkpoint(spec, cfg.model.buffer_mode, checkpoint_path);
  const auto report =
      proposition_buffer_swap(model, splits.test, cfg.train.eval_attack, cfg.train.batch_size, cfg.train.seed);
  json j;
  j["checkpoint"] = checkpoint_path;
  j["clean_with_buffer"] = report.clean_with_buffer;
  j["clean_without_buffer"] = report.clean_without_buffer;
  j["robust_with_buffer"] = report.robust_with_buffer;
  j["robust_without_buffer"] = report.robust_without_buffer;
  j["delta_clean"] = report.delta_clean();
  j["delta_robust"] = report.delta_robust();
  write_json(j, out_dir + "/bn_buffer.json");
  return report;
}

bool detect_collapse(const MetricTrace& trace, int window, double floor, int* at_epoch) {
  for (std::size_t t = 0; t < trace.rows.size(); ++t) {
    const double peak = trace.rows[t].test_robust_acc;
    if (peak < floor) continue;
    const std::size_t limit = std::min(trace.rows.size(), t + 1 + static_cast<std::size_t>(window));
    for (std::size_t u = t + 1; u < limit; ++u) {
      if (trace.rows[u].test_robust_acc < 0.5 * peak) {
        if (at_epoch != nullptr) *at_epoch = trace.rows[u].epoch;
        return true;
      }
    }
  }
  return false;
}

namespace {

struct FinalKernels {
  ClassKernel clean;
  ClassKernel adv;
};

FinalKernels load_final_kernels(const std::string& run_dir, int last_epoch) {
  const auto tag = epoch_tag(last_epoch);
  FinalKernels out;
  out.clean = load_kernel_snapshot(run_dir + "/kernels/epoch_" + tag + "_clean.entk");
  out.adv = load_kernel_snapshot(run_dir + "/kernels/epoch_" + tag + "_adv.entk");
  return out;
}

}  // namespace

SwitchCaseReport cmd_case_switch(const ExperimentConfig& base_cfg, const std::string& out_dir, bool verbose) {
  fs::create_directories(out_dir);
  ExperimentConfig cfg = base_cfg;
  // The grid needs final kernels for the KD column.
  if (cfg.artifacts.kernels == SaveMode::None) cfg.artifacts.kernels = SaveMode::Last;
  if (cfg.train.probe_interval == 0) cfg.train.probe_interval = cfg.train.epochs;

  StrategyKind inner = cfg.train.strategy.kind == StrategyKind::SwitchAT ? cfg.train.strategy.inner_kind
                                                                         : cfg.train.strategy.kind;
  if (inner == StrategyKind::Normal || inner == StrategyKind::SwitchAT)
    throw ValidationError("case switch: the configured strategy must be an AT variant");

  SwitchCaseReport report;
  const int epochs = cfg.train.epochs;

  ExperimentConfig baseline_cfg = cfg;
  baseline_cfg.train.strategy.kind = inner;
  const auto baseline = cmd_train(baseline_cfg, out_dir + "/baseline", verbose);
  const auto base_kernels = load_final_kernels(out_dir + "/baseline", epochs - 1);
  const auto base_clean_traced = traced_kernel(base_kernels.clean);
  const auto base_adv_traced = traced_kernel(base_kernels.adv);

  SwitchCaseRow base_row;
  base_row.name = "baseline";
  base_row.clean_acc = baseline.trace.rows.back().test_clean_acc;
  base_row.robust_acc = baseline.trace.rows.back().test_robust_acc;
  base_row.grad_evals = baseline.total_grad_evals;
  base_row.cost_ratio = 1.0;
  for (const auto& r : baseline.trace.rows) base_row.wall_seconds += r.wall_seconds;
  report.rows.push_back(base_row);

  for (double frac : {0.45, 0.5, 0.55, 0.7}) {
    const int k = static_cast<int>(std::lround(frac * epochs));
    ExperimentConfig run_cfg = cfg;
    run_cfg.train.strategy.kind = StrategyKind::SwitchAT;
    run_cfg.train.strategy.inner_kind = inner;
    run_cfg.train.strategy.switch_epoch = k;
    const std::string dir = out_dir + "/switch_" + std::to_string(k);
    const auto run = cmd_train(run_cfg, dir, verbose);
    SwitchCaseRow row;
    row.name = "switch_" + std::to_string(k);
    row.switch_epoch = k;
    row.clean_acc = run.trace.rows.back().test_clean_acc;
    row.robust_acc = run.trace.rows.back().test_robust_acc;
    row.grad_evals = run.total_grad_evals;
    row.cost_ratio = static_cast<double>(run.total_grad_evals) / static_cast<double>(base_row.grad_evals);
    for (const auto& r : run.trace.rows) row.wall_seconds += r.wall_seconds;
    const auto kernels = load_final_kernels(dir, epochs - 1);
    row.kd_clean_final = kernel_distance(traced_kernel(kernels.clean).matrix, base_clean_traced.matrix);
    row.kd_adv_final = kernel_distance(traced_kernel(kernels.adv).matrix, base_adv_traced.matrix);
    report.rows.push_back(row);
  }

  // Published per-epoch timings: 25 s clean, 90 s adversarial, 200 epochs.
  report.reference_ratio_k100 = (100.0 * 25.0 + 100.0 * 90.0) / (200.0 * 90.0);
  report.reference_ratio_k140 = (140.0 * 25.0 + 60.0 * 90.0) / (200.0 * 90.0);

  std::ofstream csv(out_dir + "/report.csv", std::ios::trunc);
  csv << "run,switch_epoch,clean_acc,robust_acc,grad_evals,cost_ratio,wall_seconds,kd_clean_final,kd_adv_final\n";
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : report.rows) {
    csv << r.name << ',' << r.switch_epoch << ',' << num(r.clean_acc) << ',' << num(r.robust_acc) << ','
        << r.grad_evals << ',' << num(r.cost_ratio) << ',' << num(r.wall_seconds) << ','
        << num(r.kd_clean_final) << ',' << num(r.kd_adv_final) << "\n";
  }
  csv.close();

  json j;
  j["reference_wall_ratio_k100_of_200"] = report.reference_ratio_k100;
  j["reference_wall_ratio_k140_of_200"] = report.reference_ratio_k140;
  j["inner_strategy"] = strategy_name(inner);
  j["epochs"] = epochs;
  write_json(j, out_dir + "/report.json");
  return report;
}

OverfitReport cmd_case_overfit(const ExperimentConfig& base_cfg, const std::string& out_dir, bool verbose) {
  fs::create_directories(out_dir);
  OverfitReport report;
  std::ofstream csv(out_dir + "/report.csv", std::ios::trunc);
  csv << "strategy,final_robust,peak_robust,collapsed,collapse_epoch\n";
  for (StrategyKind kind :
       {StrategyKind::FgsmAT, StrategyKind::NoiseFgsmAT, StrategyKind::TE, StrategyKind::TeOF}) {
    ExperimentConfig cfg = base_cfg;
    cfg.train.strategy.kind = kind;
    cfg.train.strategy.attack = kind == StrategyKind::FgsmAT || kind == StrategyKind::NoiseFgsmAT
                                    ? AttackConfig::fgsm_default()
                                    : AttackConfig::pgd10_train();
    const auto run = cmd_train(cfg, out_dir + "/" + strategy_name(kind), verbose);
    OverfitRow row;
    row.strategy = strategy_name(kind);
    row.final_robust = run.trace.rows.back().test_robust_acc;
    for (const auto& r : run.trace.rows) row.peak_robust = std::max(row.peak_robust, r.test_robust_acc);
    row.collapsed = detect_collapse(run.trace, 5, 0.1, &row.collapse_epoch);
    report.rows.push_back(row);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", row.final_robust);
    csv << row.strategy << ',' << buf << ',';
    std::snprintf(buf, sizeof buf, "%.17g", row.peak_robust);
    csv << buf << ',' << (row.collapsed ? 1 : 0) << ',' << row.collapse_epoch << "\n";
  }
  csv.close();
  return report;
}

}  // namespace ntklab
