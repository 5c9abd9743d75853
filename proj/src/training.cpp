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
#include "ntklab/training.hpp"

#include <sstream>

namespace ntklab {

namespace {

struct KernelMetrics {
  ClassKernel clean;
  ClassKernel adv;
  TracedKernel clean_traced;
  TracedKernel adv_traced;
};

KernelMetrics snapshot_kernels(const ModelState<double>& dstate, const Tensor<double>& probe_x,
                               const std::vector<int>& probe_labels, const std::vector<std::uint32_t>& probe_ids,
                               const AttackConfig& probe_attack, Rng& probe_rng) {
  KernelMetrics km;
  km.clean = compute_entk(dstate, probe_x, probe_labels, probe_ids);
  km.adv = compute_entk(dstate, probe_x, probe_labels, probe_ids, &probe_attack, &probe_rng);
  km.clean_traced = traced_kernel(km.clean);
  km.adv_traced = traced_kernel(km.adv);
  return km;
}

}  // namespace

RunResult run_training(const ModelSpec& spec, InitScheme init, BufferMode mode, std::uint64_t model_seed,
                       const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                       const ProbeSet& probe, const RunHooks& hooks) {
  cfg.validate();
  RunResult result;
  result.model = build_model<float>(spec, init, model_seed, mode);
  SgdState<float> opt;
  TEState te_state;
  if (cfg.strategy.uses_te()) te_state = TEState::init(train.size(), spec.n_out, cfg.strategy.te);

  const bool kernels_on = cfg.probe_interval > 0 && !probe.indices.empty();
  Tensor<double> probe_x;
  std::vector<int> probe_labels;
  std::vector<std::uint32_t> probe_ids;
  if (kernels_on) {
    probe_x = train.gather(probe.indices).cast<double>();
    probe_labels = train.gather_labels(probe.indices);
    probe_ids.reserve(probe.indices.size());
    for (int idx : probe.indices) probe_ids.push_back(static_cast<std::uint32_t>(idx));
  }
  const AttackConfig probe_attack =
      cfg.strategy.kind == StrategyKind::Normal ? AttackConfig::pgd10_train() : cfg.strategy.attack;

  TracedKernel prev_clean, prev_adv;
  bool have_prev = false;
  if (kernels_on) {
    const auto dstate = result.model.cast<double>();
    Rng probe_rng = Rng::stream(cfg.seed, 0x9000u);  // pre-training snapshot stream
    auto km = snapshot_kernels(dstate, probe_x, probe_labels, probe_ids, probe_attack, probe_rng);
    prev_clean = km.clean_traced;
    prev_adv = km.adv_traced;
    have_prev = true;
    if (hooks.on_epoch) {
      EpochArtifacts art;
      art.epoch = -1;
      art.model = &result.model;
      art.clean_kernel = &km.clean;
      art.adv_kernel = &km.adv;
      hooks.on_epoch(art);
    }
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    TraceRow row;
    row.epoch = epoch;
    row.lr = lr_at_epoch(cfg, epoch);

    const auto stats = train_epoch(result.model, opt, cfg, train,
                                   cfg.strategy.uses_te() ? &te_state : nullptr, epoch);
    row.train_loss = stats.mean_loss;
    row.grad_evals = stats.grad_evals;
    result.total_grad_evals += stats.grad_evals;

    row.train_clean_acc = evaluate_accuracy(result.model, train, nullptr, mode, cfg.batch_size);
    row.test_clean_acc = evaluate_accuracy(result.model, test, nullptr, mode, cfg.batch_size);
    Rng eval_rng = Rng::stream(cfg.seed, 0x5000u + static_cast<std::uint64_t>(epoch));
    row.test_robust_acc = evaluate_accuracy(result.model, test, &cfg.eval_attack, mode, cfg.batch_size, &eval_rng);

    const bool probe_epoch = kernels_on && (epoch % cfg.probe_interval == 0 || epoch == cfg.epochs - 1);
    KernelMetrics km;
    if (probe_epoch) {
      const auto dstate = result.model.cast<double>();
      Rng probe_rng = Rng::stream(cfg.seed, 0x9000u + 1u + static_cast<std::uint64_t>(epoch));
      km = snapshot_kernels(dstate, probe_x, probe_labels, probe_ids, probe_attack, probe_rng);
      if (have_prev) {
        row.kd_clean = kernel_distance(km.clean_traced.matrix, prev_clean.matrix);
        row.kd_adv = kernel_distance(km.adv_traced.matrix, prev_adv.matrix);
      }
      row.ker_clean = effective_rank(km.clean_traced.matrix);
      row.ker_adv = effective_rank(km.adv_traced.matrix);
      row.ks_cl_clean = kernel_specialization(ks_matrix(km.clean, LabelSource::CL));
      row.ks_cl_adv = kernel_specialization(ks_matrix(km.adv, LabelSource::CL));
      row.ks_al_adv = kernel_specialization(ks_matrix(km.adv, LabelSource::AL));
      prev_clean = km.clean_traced;
      prev_adv = km.adv_traced;
      have_prev = true;
    }

    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.trace.rows.push_back(row);

    if (hooks.on_epoch) {
      EpochArtifacts art;
      art.epoch = epoch;
      art.model = &result.model;
      art.clean_kernel = probe_epoch ? &km.clean : nullptr;
      art.adv_kernel = probe_epoch ? &km.adv : nullptr;
      art.row = &result.trace.rows.back();
      hooks.on_epoch(art);
    }
    if (hooks.log) {
      std::ostringstream os;
      os << "epoch " << epoch << " lr " << row.lr << " loss " << row.train_loss << " train "
         << row.train_clean_acc << " test " << row.test_clean_acc << " robust " << row.test_robust_acc
         << " kd " << row.kd_clean << "/" << row.kd_adv << " evals " << row.grad_evals;
      hooks.log(epoch, os.str());
    }
  }
  return result;
}

}  // namespace ntklab
