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
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "ntklab/commands.hpp"

namespace {

using namespace ntklab;

int run(int argc, char** argv) {
  CLI::App app{
      "ntklab: empirical NTK dynamics under adversarial training.\n"
      "Worker count comes from the NTKLAB_WORKERS environment variable\n"
      "(default: hardware concurrency); runs are bit-reproducible for a\n"
      "fixed seed and worker-independent by construction."};
  app.require_subcommand(1);

  // ---- train ----
  auto* train = app.add_subcommand(
      "train",
      "Run a training protocol from a JSON config into a run directory\n"
      "(config echo, seed record, trace.csv, checkpoints/, kernels/).\n"
      "Strategy noise_fgsm_at draws uniform [-eps, eps] pixel noise and adds\n"
      "it BEFORE the FGSM step; the step is taken from the noisy point.");
  std::string config_path, out_dir;
  std::int64_t seed_override = -1;
  bool quiet = false;
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  train->add_option("--out", out_dir, "output run directory")->required();
  train->add_option("--seed", seed_override, "override model and train seeds");
  train->add_flag("--quiet", quiet, "suppress per-epoch progress lines");

  // ---- metrics ----
  auto* metrics = app.add_subcommand("metrics", "Kernel metrics over saved .entk snapshots");
  metrics->require_subcommand(1);
  std::string snap_a, snap_b, labels_arg = "cl";
  auto* kd_cmd = metrics->add_subcommand("kd", "kernel distance between two snapshots (same probe)");
  kd_cmd->add_option("a", snap_a, "first snapshot")->required();
  kd_cmd->add_option("b", snap_b, "second snapshot")->required();
  auto* ker_cmd = metrics->add_subcommand("ker", "effective rank of a snapshot's traced kernel");
  ker_cmd->add_option("a", snap_a, "snapshot")->required();
  auto* ks_cmd = metrics->add_subcommand("ks", "kernel specialization of a snapshot");
  ks_cmd->add_option("a", snap_a, "snapshot")->required();
  ks_cmd->add_option("--labels", labels_arg, "label source: cl (ground truth) or al (adversarial)");

  // ---- check ----
  auto* check = app.add_subcommand("check", "Numerical theorem and proposition checks");
  check->require_subcommand(1);
  auto* thm1 = check->add_subcommand("thm1", "traced-kernel shift under iid sign perturbations");
  std::string thm1_config, thm1_out;
  int thm1_trials = 10, thm1_probe = 32;
  thm1->add_option("--config", thm1_config, "experiment config (model/dataset/probe)")->required();
  thm1->add_option("--out", thm1_out, "report directory")->required();
  thm1->add_option("--trials", thm1_trials, "trials per epsilon");
  thm1->add_option("--probe", thm1_probe, "probe size");

  auto* thm2 = check->add_subcommand("thm2", "normalization-statistics bound trials");
  std::string thm2_out, thm2_variant = "proof", thm2_f = "identity";
  int thm2_alpha = 32, thm2_k = 8, thm2_trials = 1000;
  std::uint64_t thm2_seed = 1;
  thm2->add_option("--out", thm2_out, "report directory")->required();
  thm2->add_option("--alpha", thm2_alpha, "subset size");
  thm2->add_option("--k", thm2_k, "subset count");
  thm2->add_option("--trials", thm2_trials, "trial count");
  thm2->add_option("--seed", thm2_seed, "rng seed");
  thm2->add_option("--variant", thm2_variant, "A variant: proof | statement");
  thm2->add_option("--f", thm2_f, "test function: identity | tanh");

  auto* bnb = check->add_subcommand("bn-buffer", "buffer-swap accuracy gaps on a trained checkpoint");
  std::string bnb_config, bnb_ckpt, bnb_out;
  bnb->add_option("--config", bnb_config, "experiment config (model/dataset/eval attack)")->required();
  bnb->add_option("--checkpoint", bnb_ckpt, "trained checkpoint (.ckpt)")->required();
  bnb->add_option("--out", bnb_out, "report directory")->required();

  // ---- case ----
  auto* case_cmd = app.add_subcommand("case", "Comparative case studies");
  case_cmd->require_subcommand(1);
  auto* sw = case_cmd->add_subcommand("switch", "clean-then-AT switch grid vs all-AT baseline");
  std::string sw_config, sw_out;
  bool sw_quiet = false;
  sw->add_option("--config", sw_config, "experiment config")->required();
  sw->add_option("--out", sw_out, "report directory")->required();
  sw->add_flag("--quiet", sw_quiet, "suppress progress");
  auto* of = case_cmd->add_subcommand("overfit", "single-step collapse comparison across strategies");
  std::string of_config, of_out;
  bool of_quiet = false;
  of->add_option("--config", of_config, "experiment config")->required();
  of->add_option("--out", of_out, "report directory")->required();
  of->add_flag("--quiet", of_quiet, "suppress progress");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    auto cfg = parse_config(config_path);
    if (seed_override >= 0) {
      cfg.train.seed = static_cast<std::uint64_t>(seed_override);
      cfg.model.seed = static_cast<std::uint64_t>(seed_override);
    }
    const auto result = cmd_train(cfg, out_dir, !quiet);
    std::cout << "run " << out_dir << " done: test clean " << result.trace.rows.back().test_clean_acc
              << ", test robust " << result.trace.rows.back().test_robust_acc << ", grad evals "
              << result.total_grad_evals << "\n";
    return 0;
  }
  if (kd_cmd->parsed()) {
    std::printf("%.17g\n", cmd_metrics_kd(snap_a, snap_b));
    return 0;
  }
  if (ker_cmd->parsed()) {
    std::printf("%.17g\n", cmd_metrics_ker(snap_a));
    return 0;
  }
  if (ks_cmd->parsed()) {
    LabelSource src;
    if (labels_arg == "cl")
      src = LabelSource::CL;
    else if (labels_arg == "al")
      src = LabelSource::AL;
    else
      throw ValidationError("metrics ks: --labels must be cl or al");
    std::printf("%.17g\n", cmd_metrics_ks(snap_a, src));
    return 0;
  }
  if (thm1->parsed()) {
    const auto cfg = parse_config(thm1_config);
    const std::vector<double> eps = {0.0, 1.0 / 255, 2.0 / 255, 4.0 / 255, 8.0 / 255};
    const auto summary = cmd_check_thm1(cfg, thm1_out, eps, thm1_trials, thm1_probe);
    std::cout << "r(0) = " << summary.r_zero << ", monotone = " << (summary.monotone ? "yes" : "no")
              << ", log-log slope = " << summary.report.loglog_slope << "\n";
    return 0;
  }
  if (thm2->parsed()) {
    const AVariant variant = thm2_variant == "statement" ? AVariant::Statement : AVariant::ProofConsistent;
    const FKind f = thm2_f == "tanh" ? FKind::Tanh : FKind::Identity;
    const auto report = cmd_check_thm2(thm2_out, f, thm2_alpha, thm2_k, thm2_trials, thm2_seed, variant);
    std::cout << "violations: " << report.violations << "\n";
    if (report.infeasible_count > 0) std::cout << "infeasible trials: " << report.infeasible_count << "\n";
    return 0;
  }
  if (bnb->parsed()) {
    const auto cfg = parse_config(bnb_config);
    const auto report = cmd_check_bn_buffer(cfg, bnb_ckpt, bnb_out);
    std::cout << "clean  w/buffer " << report.clean_with_buffer << "  w/o " << report.clean_without_buffer
              << "  gap " << report.delta_clean() << "\n"
              << "robust w/buffer " << report.robust_with_buffer << "  w/o " << report.robust_without_buffer
              << "  gap " << report.delta_robust() << "\n";
    return 0;
  }
  if (sw->parsed()) {
    const auto cfg = parse_config(sw_config);
    const auto report = cmd_case_switch(cfg, sw_out, !sw_quiet);
    for (const auto& r : report.rows) {
      std::cout << r.name << ": robust " << r.robust_acc << ", cost ratio " << r.cost_ratio << ", final KD "
                << r.kd_clean_final << "/" << r.kd_adv_final << "\n";
    }
    std::cout << "reference wall ratios: " << report.reference_ratio_k100 * 100 << "% (switch 100/200), "
              << report.reference_ratio_k140 * 100 << "% (switch 140/200)\n";
    return 0;
  }
  if (of->parsed()) {
    const auto cfg = parse_config(of_config);
    const auto report = cmd_case_overfit(cfg, of_out, !of_quiet);
    for (const auto& r : report.rows) {
      std::cout << r.strategy << ": final robust " << r.final_robust << ", peak " << r.peak_robust
                << (r.collapsed ? ", collapsed at epoch " + std::to_string(r.collapse_epoch) : ", no collapse")
                << "\n";
    }
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ntklab::NumericFault& e) {
    std::cerr << "numeric fault: " << e.what() << "\n";
    return 2;
  } catch (const ntklab::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
