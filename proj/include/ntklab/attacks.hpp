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

#include "ntklab/autodiff.hpp"
#include "ntklab/data.hpp"

namespace ntklab {

struct AttackConfig {
  double epsilon = 8.0 / 255.0;  // l-inf budget
  double alpha = 2.0 / 255.0;    // step size
  int steps = 10;
  bool random_start = true;

  void validate() const {
    if (epsilon < 0.0) throw ValidationError("attack: epsilon must be >= 0");
    if (steps < 1) throw ValidationError("attack: steps must be >= 1");
    if (alpha <= 0.0) throw ValidationError("attack: alpha must be > 0");
  }

  static AttackConfig fgsm_default() { return AttackConfig{8.0 / 255.0, 8.0 / 255.0, 1, false}; }
  static AttackConfig pgd10_train() { return AttackConfig{8.0 / 255.0, 2.0 / 255.0, 10, true}; }
  static AttackConfig pgd20_eval() { return AttackConfig{8.0 / 255.0, 2.0 / 255.0, 20, true}; }
};

/// Counts gradient evaluations (one per backward pass over a batch): attack
/// steps and optimizer updates both tick it.
struct GradEvalCounter {
  long long count = 0;
};

template <typename S>
S sign0(S v) {
  return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
}

/// Projected gradient ascent under l-inf: iterate
///   x <- clip01( project_ball(x + alpha * sign(grad_x loss), x0, eps) ).
/// random_start draws the initial point uniform in the eps-ball (then clipped
/// to [0,1]). BN follows the model's buffer mode via the Eval phase: buffers
/// when WithBuffer, the attacked batch's own statistics (recomputed every
/// step) when WithoutBuffer.
template <typename S>
Tensor<S> pgd(const ModelState<S>& state, const Tensor<S>& x0, const std::vector<int>& labels,
              const AttackConfig& cfg, Rng* rng = nullptr, GradEvalCounter* counter = nullptr,
              std::vector<double>* loss_trace = nullptr, const LossSpec<S>* loss_override = nullptr) {
  cfg.validate();
  if (cfg.random_start && rng == nullptr) throw ValidationError("attack: random start needs an rng");
  const S eps = static_cast<S>(cfg.epsilon);
  const S alpha = static_cast<S>(cfg.alpha);

  LossSpec<S> default_loss = LossSpec<S>::ce(labels);
  const LossSpec<S>& loss = loss_override != nullptr ? *loss_override : default_loss;

  const int n = x0.dim(0);
  const Eigen::Index per_sample = x0.size() / n;
  Tensor<S> x = x0;
  if (cfg.random_start) {
    // Draws stay sequential for reproducibility; only the apply is parallel.
    Vec<S> noise(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i)
      noise[i] = static_cast<S>(rng->uniform(-cfg.epsilon, cfg.epsilon));
    parallel_chunks(static_cast<std::size_t>(n), [&](std::size_t, std::size_t b, std::size_t e) {
      for (Eigen::Index i = static_cast<Eigen::Index>(b) * per_sample;
           i < static_cast<Eigen::Index>(e) * per_sample; ++i) {
        x[i] = std::min(S(1), std::max(S(0), static_cast<S>(x0[i] + noise[i])));
      }
    });
  }
  for (int step = 0; step < cfg.steps; ++step) {
    auto [lv, g] = grad_input(state, x, loss, Phase::Eval);
    if (counter != nullptr) ++counter->count;
    if (loss_trace != nullptr) loss_trace->push_back(static_cast<double>(lv));
    parallel_chunks(static_cast<std::size_t>(n), [&](std::size_t, std::size_t b, std::size_t e) {
      for (Eigen::Index i = static_cast<Eigen::Index>(b) * per_sample;
           i < static_cast<Eigen::Index>(e) * per_sample; ++i) {
        S v = x[i] + alpha * sign0(g[i]);
        v = std::min(x0[i] + eps, std::max(x0[i] - eps, v));  // project into the eps-ball
        x[i] = std::min(S(1), std::max(S(0), v));             // and the image range
      }
    });
  }
  return x;
}

/// Single-step sign attack: x' = clip01(x + alpha * sign(grad_x loss)).
/// Definitionally pgd with one step and no random start.
template <typename S>
Tensor<S> fgsm(const ModelState<S>& state, const Tensor<S>& x0, const std::vector<int>& labels,
               const AttackConfig& cfg, GradEvalCounter* counter = nullptr) {
  if (cfg.steps != 1) throw ValidationError("fgsm: steps must be 1");
  AttackConfig one = cfg;
  one.random_start = false;
  return pgd(state, x0, labels, one, nullptr, counter);
}

/// Fraction of argmax-correct predictions, optionally on adversarial inputs
/// generated with `attack`. bn_eval_mode overrides the model's buffer mode
/// for both the attack and the final prediction.
template <typename S>
double evaluate_accuracy(const ModelState<S>& state, const Dataset& ds, const AttackConfig* attack,
                         BufferMode bn_eval_mode, int batch_size, Rng* attack_rng = nullptr,
                         GradEvalCounter* counter = nullptr) {
  if (ds.size() == 0) throw ValidationError("evaluate: empty dataset");
  ModelState<S> eval_state = state;
  eval_state.buffer_mode = bn_eval_mode;
  long long correct = 0;
  for (int begin = 0; begin < ds.size(); begin += batch_size) {
    const int end = std::min(ds.size(), begin + batch_size);
    std::vector<int> idx(static_cast<std::size_t>(end - begin));
    for (int i = begin; i < end; ++i) idx[static_cast<std::size_t>(i - begin)] = i;
    Tensor<S> x = ds.gather(idx).template cast<S>();
    const auto labels = ds.gather_labels(idx);
    if (attack != nullptr) {
      x = pgd(eval_state, x, labels, *attack, attack_rng, counter);
    }
    const auto logits = forward_logits(eval_state, x, Phase::Eval);
    for (Eigen::Index j = 0; j < logits.rows(); ++j) {
      Eigen::Index arg;
      logits.row(j).maxCoeff(&arg);
      if (static_cast<int>(arg) == labels[static_cast<std::size_t>(j)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace ntklab
