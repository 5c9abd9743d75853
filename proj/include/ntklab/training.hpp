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

#include <chrono>
#include <memory>

#include "ntklab/metrics.hpp"

namespace ntklab {

enum class StrategyKind { Normal, FgsmAT, PgdAT, TE, SwitchAT, TeOF, NoiseFgsmAT };

inline const char* strategy_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::Normal: return "normal";
    case StrategyKind::FgsmAT: return "fgsm_at";
    case StrategyKind::PgdAT: return "pgd_at";
    case StrategyKind::TE: return "te";
    case StrategyKind::SwitchAT: return "switch_at";
    case StrategyKind::TeOF: return "te_of";
    case StrategyKind::NoiseFgsmAT: return "noise_fgsm_at";
  }
  return "?";
}

inline StrategyKind strategy_from_string(const std::string& s) {
  for (StrategyKind k : {StrategyKind::Normal, StrategyKind::FgsmAT, StrategyKind::PgdAT, StrategyKind::TE,
                         StrategyKind::SwitchAT, StrategyKind::TeOF, StrategyKind::NoiseFgsmAT}) {
    if (s == strategy_name(k)) return k;
  }
  throw ValidationError("unknown strategy: " + s);
}

struct TeSettings {
  double ema_momentum = 0.9;
  double w_max = 30.0;
  int rampup_epochs = -1;  // -1: use the first decay epoch
};

struct Strategy {
  StrategyKind kind = StrategyKind::Normal;
  AttackConfig attack = AttackConfig::pgd10_train();
  double noise_epsilon = 8.0 / 255.0;  // NoiseFgsmAT pre-attack noise
  TeSettings te;
  int switch_epoch = 0;                            // SwitchAT
  StrategyKind inner_kind = StrategyKind::PgdAT;   // SwitchAT payload

  bool uses_te() const { return kind == StrategyKind::TE || kind == StrategyKind::TeOF; }

  void validate(int epochs) const {
    if (kind == StrategyKind::SwitchAT) {
      if (switch_epoch < 0 || switch_epoch >= epochs)
        throw ValidationError("strategy: switch_epoch must lie in [0, epochs)");
      if (inner_kind == StrategyKind::Normal || inner_kind == StrategyKind::SwitchAT)
        throw ValidationError("strategy: switch inner strategy must be an AT variant");
    }
    if (kind != StrategyKind::Normal) attack.validate();
    if (noise_epsilon < 0.0) throw ValidationError("strategy: noise epsilon must be >= 0");
  }

  /// The variant actually executed at a given epoch (SwitchAT dispatch).
  StrategyKind at_epoch(int epoch) const {
    if (kind != StrategyKind::SwitchAT) return kind;
    return epoch < switch_epoch ? StrategyKind::Normal : inner_kind;
  }
};

struct TrainConfig {
  int epochs = 60;
  int batch_size = 128;
  double lr0 = 0.1;
  std::vector<int> decay_epochs = {30, 45};
  double decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Strategy strategy;
  std::uint64_t seed = 1;
  int probe_interval = 1;  // epochs between ENTK snapshots; 0 disables them
  AttackConfig eval_attack = AttackConfig::pgd20_eval();
  AugmentationConfig augment;
  // Instrumentation tap: when set, every batch's augmentation draws are
  // appended here. Not part of the config schema.
  std::vector<AugmentationTrace>* augment_tap = nullptr;

  void validate() const {
    if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
    for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
      if (decay_epochs[i] >= epochs) throw ValidationError("train: decay epochs must be < epochs");
      if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1])
        throw ValidationError("train: decay epochs must be strictly increasing");
    }
    if (probe_interval < 0) throw ValidationError("train: probe_interval must be >= 0");
    strategy.validate(epochs);
  }

  int te_rampup() const {
    if (strategy.te.rampup_epochs > 0) return strategy.te.rampup_epochs;
    return decay_epochs.empty() ? epochs : decay_epochs.front();
  }
};

/// lr0 * decay_factor^(number of decay epochs <= t).
inline double lr_at_epoch(const TrainConfig& cfg, int t) {
  if (t < 0 || t >= cfg.epochs) throw ValidationError("lr: epoch out of range");
  int hits = 0;
  for (int d : cfg.decay_epochs) hits += (d <= t);
  return cfg.lr0 * std::pow(cfg.decay_factor, hits);
}

/// Momentum SGD: v <- m*v + g + wd*theta; theta <- theta - lr*v.
/// BN buffers live outside the ParamVector, so the optimizer can never touch
/// them; gamma/beta are ordinary parameters and do receive weight decay.
template <typename S>
struct SgdState {
  Vec<S> velocity;
};

template <typename S>
void sgd_step(ParamVector<S>& params, const ParamVector<S>& grads, SgdState<S>& opt, S lr, S momentum,
              S weight_decay) {
  if (grads.size() != params.size()) throw ValidationError("sgd: gradient size mismatch");
  if (opt.velocity.size() != params.size()) opt.velocity = Vec<S>::Zero(params.size());
  opt.velocity = momentum * opt.velocity + grads.data() + weight_decay * params.data();
  params.data() -= lr * opt.velocity;
}

/// Per-sample EMA of softmax predictions with per-epoch bias correction.
struct TEState {
  MatRMd ema;  // [M, n_out]
  std::vector<int> update_count;
  TeSettings cfg;

  static TEState init(int samples, int n_out, TeSettings cfg) {
    TEState st;
    st.ema = MatRMd::Zero(samples, n_out);
    st.update_count.assign(static_cast<std::size_t>(samples), 0);
    st.cfg = cfg;
    return st;
  }

  /// Bias-corrected target for one sample; rows are probability vectors once
  /// at least one update has landed.
  Vecd corrected(int id) const {
    const int c = update_count[static_cast<std::size_t>(id)];
    if (c == 0) return Vecd();
    const double denom = 1.0 - std::pow(cfg.ema_momentum, static_cast<double>(c));
    return ema.row(id).transpose() / denom;
  }

  void update(int id, const Eigen::Ref<const Vecd>& probs) {
    const double m = cfg.ema_momentum;
    ema.row(id) = m * ema.row(id) + (1.0 - m) * probs.transpose();
    update_count[static_cast<std::size_t>(id)]++;
  }
};

/// w(t) = w_max * exp(-5 (1 - min(t/rampup, 1))^2).
inline double te_weight(const TeSettings& te, int epoch, int rampup) {
  const double frac = rampup <= 0 ? 1.0 : std::min(1.0, static_cast<double>(epoch) / rampup);
  const double ramp = std::exp(-5.0 * (1.0 - frac) * (1.0 - frac));
  return te.w_max * ramp;
}

/// CE(logits, y) + w(t) * mean_j ||softmax(logits_j) - p_hat_j||^2, with the
/// gradient w.r.t. logits. Samples that have never been updated contribute no
/// consistency term. p_hat updates happen separately, after the SGD step.
template <typename S>
LossGrad<S> te_loss(const MatRM<S>& logits, const std::vector<int>& labels, const TEState& te,
                    const std::vector<int>& sample_ids, int epoch, int rampup) {
  LossGrad<S> lg = softmax_cross_entropy(logits, labels);
  const double w = te_weight(te.cfg, epoch, rampup);
  if (w == 0.0) return lg;
  const Eigen::Index n = logits.rows();
  const S scale = static_cast<S>(w) / static_cast<S>(n);
  double extra = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const Vecd target = te.corrected(sample_ids[static_cast<std::size_t>(j)]);
    if (target.size() == 0) continue;
    const Vec<S> p = lg.probs.row(j).transpose();
    const Vec<S> diff = p - target.template cast<S>();
    extra += diff.squaredNorm();
    // d/dz ||p - t||^2 = 2 * (diag(p) - p p^T) (p - t)
    const Vec<S> v = S(2) * diff;
    const Vec<S> dz = p.cwiseProduct(v) - p * p.dot(v);
    lg.dlogits.row(j) += (scale * dz).transpose();
  }
  lg.loss += static_cast<S>(w * extra / static_cast<double>(n));
  return lg;
}

struct TraceRow {
  int epoch = 0;
  double lr = 0.0;
  double train_clean_acc = 0.0;
  double test_clean_acc = 0.0;
  double test_robust_acc = 0.0;
  double train_loss = 0.0;
  double kd_clean = 0.0;
  double kd_adv = 0.0;
  double ker_clean = 0.0;
  double ker_adv = 0.0;
  double ks_cl_clean = 0.0;
  double ks_cl_adv = 0.0;
  double ks_al_adv = 0.0;
  double wall_seconds = 0.0;
  long long grad_evals = 0;
};

struct MetricTrace {
  std::vector<TraceRow> rows;
};

struct EpochStats {
  double mean_loss = 0.0;
  long long grad_evals = 0;
  long long attack_grad_evals = 0;
};

/// One pass over the shuffled training set under the strategy active at
/// `epoch`. Attack generation works on parameter snapshots (read-only); the
/// optimizer state is single-writer.
template <typename S>
EpochStats train_epoch(ModelState<S>& state, SgdState<S>& opt, const TrainConfig& cfg, const Dataset& train,
                       TEState* te_state, int epoch) {
  const StrategyKind active = cfg.strategy.at_epoch(epoch);
  const double lr = lr_at_epoch(cfg, epoch);
  Rng shuffle_rng = Rng::stream(cfg.seed, 0x1000u + static_cast<std::uint64_t>(epoch));
  Rng augment_rng = Rng::stream(cfg.seed, 0x2000u + static_cast<std::uint64_t>(epoch));
  Rng attack_rng = Rng::stream(cfg.seed, 0x3000u + static_cast<std::uint64_t>(epoch));
  Rng noise_rng = Rng::stream(cfg.seed, 0x4000u + static_cast<std::uint64_t>(epoch));

  std::vector<int> order(static_cast<std::size_t>(train.size()));
  for (int i = 0; i < train.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  shuffle_rng.shuffle(order);

  AugmentationConfig aug = cfg.augment;
  if (active == StrategyKind::TeOF) aug.mode = AugMode::BatchShared;

  GradEvalCounter counter;
  EpochStats stats;
  double loss_sum = 0.0;
  int batches = 0;

  for (int begin = 0; begin < train.size(); begin += cfg.batch_size) {
    const int end = std::min(train.size(), begin + cfg.batch_size);
    std::vector<int> ids(order.begin() + begin, order.begin() + end);
    AugmentationTrace aug_trace;
    Tensor<float> batch_f =
        augment(train.gather(ids), aug, augment_rng, cfg.augment_tap != nullptr ? &aug_trace : nullptr);
    if (cfg.augment_tap != nullptr) cfg.augment_tap->push_back(std::move(aug_trace));
    const auto labels = train.gather_labels(ids);
    Tensor<S> x = batch_f.template cast<S>();

    Tensor<S> x_train;
    switch (active) {
      case StrategyKind::Normal:
        x_train = std::move(x);
        break;
      case StrategyKind::FgsmAT:
        x_train = fgsm(state, x, labels, cfg.strategy.attack, &counter);
        break;
      case StrategyKind::PgdAT:
      case StrategyKind::TE:
      case StrategyKind::TeOF:
        x_train = pgd(state, x, labels, cfg.strategy.attack, &attack_rng, &counter);
        break;
      case StrategyKind::NoiseFgsmAT: {
        Tensor<float> noisy = add_anisotropic_noise(batch_f, cfg.strategy.noise_epsilon, noise_rng);
        x_train = fgsm(state, noisy.template cast<S>(), labels, cfg.strategy.attack, &counter);
        break;
      }
      case StrategyKind::SwitchAT:
        throw ValidationError("train: switch strategy must be resolved per epoch");
    }

    auto rec = run_forward<S>(state, x_train, Phase::Train, nullptr, &state.bn);
    if (!rec.logits().allFinite())
      throw NumericFault("train: non-finite logits at epoch " + std::to_string(epoch) + " batch " +
                         std::to_string(batches));
    LossGrad<S> lg;
    if (cfg.strategy.uses_te() && active != StrategyKind::Normal && te_state != nullptr) {
      lg = te_loss(rec.logits(), labels, *te_state, ids, epoch, cfg.te_rampup());
    } else {
      lg = softmax_cross_entropy(rec.logits(), labels);
    }
    auto br = backward(state, rec, lg.dlogits, /*params=*/true, /*input=*/false);
    ++counter.count;
    if (!std::isfinite(static_cast<double>(lg.loss)) || !br.param_grads.data().allFinite())
      throw NumericFault("train: non-finite loss/gradient at epoch " + std::to_string(epoch) + " batch " +
                         std::to_string(batches));
    sgd_step(state.params, br.param_grads, opt, static_cast<S>(lr), static_cast<S>(cfg.momentum),
             static_cast<S>(cfg.weight_decay));

    if (cfg.strategy.uses_te() && active != StrategyKind::Normal && te_state != nullptr) {
      MatRMd probs = lg.probs.template cast<double>();
      for (std::size_t j = 0; j < ids.size(); ++j) {
        te_state->update(ids[j], probs.row(static_cast<Eigen::Index>(j)).transpose());
      }
    }
    loss_sum += static_cast<double>(lg.loss);
    ++batches;
  }
  stats.grad_evals = counter.count;
  stats.attack_grad_evals = counter.count - batches;
  stats.mean_loss = loss_sum / std::max(1, batches);
  return stats;
}

/// Per-epoch artifacts offered to the persistence hook.
struct EpochArtifacts {
  int epoch = -1;  // -1 for the pre-training snapshot
  const ModelState<float>* model = nullptr;
  const ClassKernel* clean_kernel = nullptr;
  const ClassKernel* adv_kernel = nullptr;
  const TraceRow* row = nullptr;  // null for the pre-training snapshot
};

struct RunHooks {
  std::function<void(const EpochArtifacts&)> on_epoch;
  std::function<void(int, const std::string&)> log;  // (epoch, line)
};

struct RunResult {
  MetricTrace trace;
  ModelState<float> model;
  long long total_grad_evals = 0;
};

/// Full training protocol: per epoch, one training pass; accuracy
/// evaluations; on probe epochs a checkpoint plus C-NTK and AE-NTK snapshots
/// with KD/KER/KS entries (KD compares against the previous snapshot; the
/// epoch-0 reference is the kernel at initialization). Kernel columns hold
/// 0.0 on epochs without a snapshot so every numeric field stays finite.
RunResult run_training(const ModelSpec& spec, InitScheme init, BufferMode mode, std::uint64_t model_seed,
                       const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                       const ProbeSet& probe, const RunHooks& hooks = {});

}  // namespace ntklab
