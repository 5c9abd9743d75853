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
#pragma once

#include "ntklab/config.hpp"
#include "ntklab/io.hpp"
#include "ntklab/theory.hpp"

namespace ntklab {

/// Full training run into a self-describing directory: config echo + seed
/// record + trace.csv + checkpoints/ + kernels/ per the artifacts policy.
RunResult cmd_train(const ExperimentConfig& cfg, const std::string& out_dir, bool verbose);

/// KD between the traced kernels of two snapshots; rejects mismatched probes.
double cmd_metrics_kd(const std::string& path_a, const std::string& path_b);
double cmd_metrics_ker(const std::string& path);
double cmd_metrics_ks(const std::string& path, LabelSource source);

struct Thm1Summary {
  Thm1Report report;
  double r_zero = 0.0;
  bool monotone = true;
};

/// Theorem-1 shift experiment on a fresh (randomly initialized) model from
/// the config; writes thm1.csv (one row per eps x trial) and thm1.json.
Thm1Summary cmd_check_thm1(const ExperimentConfig& cfg, const std::string& out_dir,
                           const std::vector<double>& epsilons, int trials, int probe_size);

/// Theorem-2 bound trials; writes thm2.csv and thm2.json, prints the
/// violation count.
Thm2Report cmd_check_thm2(const std::string& out_dir, FKind f_kind, int alpha, int k, int trials,
                          std::uint64_t seed, AVariant variant);

/// Buffer-swap propositions on a trained checkpoint; writes bn_buffer.json.
BufferSwapReport cmd_check_bn_buffer(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                                     const std::string& out_dir);

struct SwitchCaseRow {
  std::string name;
  int switch_epoch = -1;  // -1 for the baseline
  double clean_acc = 0.0;
  double robust_acc = 0.0;
  long long grad_evals = 0;
  double cost_ratio = 1.0;
  double wall_seconds = 0.0;
  double kd_clean_final = 0.0;  // final C-NTK distance to the baseline's
  double kd_adv_final = 0.0;
};

struct SwitchCaseReport {
  std::vector<SwitchCaseRow> rows;
  // The reference wall-clock ratios reproduced from the published per-epoch
  // timings (25 s clean, 90 s adversarial, 200 epochs).
  double reference_ratio_k100 = 0.0;
  double reference_ratio_k140 = 0.0;
};

SwitchCaseReport cmd_case_switch(const ExperimentConfig& cfg, const std::string& out_dir, bool verbose);

struct OverfitRow {
  std::string strategy;
  double final_robust = 0.0;
  double peak_robust = 0.0;
  bool collapsed = false;
  int collapse_epoch = -1;
};

struct OverfitReport {
  std::vector<OverfitRow> rows;
};

OverfitReport cmd_case_overfit(const ExperimentConfig& cfg, const std::string& out_dir, bool verbose);

/// Robust-accuracy collapse: some epoch at or above `floor` is followed
/// within `window` epochs by a drop of more than 50% relative.
bool detect_collapse(const MetricTrace& trace, int window = 5, double floor = 0.1, int* at_epoch = nullptr);

}  // namespace ntklab
