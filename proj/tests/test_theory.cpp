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
#include <doctest.h>

#include "ntklab/theory.hpp"
#include "support.hpp"

using namespace ntklab;
using namespace ntklab::testing;

namespace {

ModelSpec tanh_cnn(int classes) {
  ModelSpec spec;
  spec.name = "tanh_cnn";
  spec.in_ch = 3;
  spec.in_h = 8;
  spec.in_w = 8;
  spec.n_out = classes;
  spec.layers = {LayerSpec::conv2d(6, 3, 2, 1),  LayerSpec::batchnorm(), LayerSpec::tanh(),
                 LayerSpec::conv2d(10, 3, 1, 1), LayerSpec::batchnorm(), LayerSpec::tanh(),
                 LayerSpec::global_avg_pool(),   LayerSpec::linear(classes)};
  return spec;
}

Dataset theory_dataset(int per_class, std::uint64_t draw_seed = 21) {
  SynthSpec spec;
  spec.class_count = 3;
  spec.per_class = per_class;
  spec.channels = 3;
  spec.height = 8;
  spec.width = 8;
  spec.noise = 0.1;
  spec.proto_seed = 14;
  spec.draw_seed = draw_seed;
  return synth_dataset(spec);
}

}  // namespace

TEST_SUITE_BEGIN("theory");

TEST_CASE("theorem 1 shift: exact zero at eps 0, growth roughly linear on a smooth model") {
  const auto ds = theory_dataset(8);
  auto state = build_model<double>(tanh_cnn(3), InitScheme{InitKind::Uniform}, 6);
  std::vector<int> idx;
  for (int i = 0; i < 12; ++i) idx.push_back(i);
  const Tensor<double> probe = ds.gather(idx).cast<double>();
  const auto labels = ds.gather_labels(idx);

  const std::vector<double> eps = {0.0, 1.0 / 255, 2.0 / 255, 4.0 / 255, 8.0 / 255};
  const auto report = theorem1_shift(state, probe, labels, eps, 3, 99);
  const auto means = report.mean_shifts();
  CHECK(means[0] == 0.0);  // exact: identical Jacobian paths cancel bitwise
  for (std::size_t i = 1; i < means.size(); ++i) {
    CHECK(means[i] >= means[i - 1]);
    CHECK(means[i] > 0.0);
  }
  CHECK(report.loglog_slope > 0.6);
  CHECK(report.loglog_slope < 1.4);
  // Coupled (sign-of-gradient) curve exists for contrast and is finite.
  for (double v : report.coupled_shifts) CHECK(std::isfinite(v));

  CHECK_THROWS_AS(theorem1_shift(state, probe, labels, {1.0 / 255}, 2, 1), ValidationError);  // no zero
}

TEST_CASE("theorem 2: proof-consistent margins are nonnegative across random trials") {
  for (FKind f : {FKind::Identity, FKind::Tanh}) {
    const auto report = theorem2_check(f, 32, 8, 100, 7, AVariant::ProofConsistent);
    CHECK(report.violations == 0);
    CHECK(report.infeasible_count == 0);
    for (const auto& t : report.trials) CHECK(t.margin_min >= -1e-10);
  }
}

TEST_CASE("theorem 2: statement variant flags the negative-A hand example without crashing") {
  // Subset x ~= [1, 1]: S2 ~= 2, S1 ~= 2, A = S2 - S1^2 ~= -2 < 0, so the
  // statement's sqrt(E(A)) is undefined and the trial is flagged infeasible.
  // (A hair of spread keeps the subset standard variance above the
  // degeneracy guard.)
  const std::vector<double> x = {1.0, 1.000001};
  const auto statement = theorem2_bound_once(FKind::Identity, x, 2, 1, AVariant::Statement);
  CHECK(statement.infeasible);
  // The proof-consistent A = alpha*S2 - S1^2 = alpha^2 * variance stays
  // positive on the same data.
  const auto proof = theorem2_bound_once(FKind::Identity, x, 2, 1, AVariant::ProofConsistent);
  CHECK_FALSE(proof.infeasible);
  CHECK(proof.margin_min >= -1e-10);
}

TEST_CASE("theorem 2: constant-population case and degenerate subsets") {
  // Identical subset statistics: LHS is exactly 0 on the shared elements.
  std::vector<double> x;
  for (int i = 0; i < 4; ++i) {
    x.push_back(-1.0);
    x.push_back(1.0);
  }
  // Every subset {-1,1}: Sigma_i = Sigma = 0; Pi_i = 1; Pi = sqrt(2/1 * 1) != Pi_i,
  // so use the proof-consistent variant and only require the bound to hold.
  const auto trial = theorem2_bound_once(FKind::Tanh, x, 2, 4, AVariant::ProofConsistent);
  CHECK_FALSE(trial.infeasible);
  CHECK(trial.margin_min >= 0.0);

  // Near-constant subsets are rejected as degenerate.
  const std::vector<double> flat = {2.0, 2.0, 2.0, 2.0};
  CHECK_THROWS_AS(theorem2_bound_once(FKind::Identity, flat, 2, 2, AVariant::ProofConsistent),
                  ValidationError);
  CHECK_THROWS_AS(theorem2_bound_once(FKind::Identity, flat, 1, 2, AVariant::ProofConsistent),
                  ValidationError);  // alpha < 2
}

TEST_CASE("buffer swap: untrained model has near-zero gaps; forced-equal statistics coincide bitwise") {
  const auto ds = theory_dataset(16);
  ModelSpec spec;
  spec.name = "bn_probe";
  spec.in_ch = 3;
  spec.in_h = 8;
  spec.in_w = 8;
  spec.n_out = 3;
  spec.layers = {LayerSpec::conv2d(6, 3, 2, 1), LayerSpec::batchnorm(), LayerSpec::relu(),
                 LayerSpec::global_avg_pool(), LayerSpec::linear(3)};
  auto model = build_model<float>(spec, InitScheme{InitKind::Normal}, 11);
  AttackConfig eval_attack{8.0 / 255, 2.0 / 255, 3, true};
  const auto report = proposition_buffer_swap(model, ds, eval_attack, 16, 5);
  // Random logits either way: both gaps live in chance-level noise.
  CHECK(std::abs(report.delta_clean()) < 0.25);
  CHECK(std::abs(report.delta_robust()) < 0.25);

  // Force the buffers to equal the evaluated batch's own statistics: the two
  // modes coincide bitwise on that batch.
  std::vector<int> idx;
  for (int i = 0; i < 16; ++i) idx.push_back(i);
  Tensor<float> batch = ds.gather(idx);
  auto rec = run_forward(model, batch, Phase::Eval);  // WithoutBuffer-style stats via a Train-stat capture
  // Capture batch statistics through a WithoutBuffer eval forward.
  auto mode_b = model;
  mode_b.buffer_mode = BufferMode::WithoutBuffer;
  auto rec_wb = run_forward(mode_b, batch, Phase::Eval);
  auto forced = model;
  for (std::size_t b = 0; b < forced.bn.size(); ++b) {
    forced.bn[b].running_mean = rec_wb.bn_used[b].mean;
    forced.bn[b].running_var =
        (rec_wb.bn_used[b].inv_std.array().square().inverse() - forced.bn[b].eps).max(0.0f).matrix();
  }
  const auto with_logits = forward_logits(forced, batch, Phase::Eval);
  const auto without_logits = forward_logits(mode_b, batch, Phase::Eval);
  CHECK((with_logits - without_logits).cwiseAbs().maxCoeff() < 2e-6f);
}

TEST_CASE("without-buffer evaluation depends on batch composition; with-buffer does not") {
  const auto ds = theory_dataset(16);
  ModelSpec spec = tanh_cnn(3);
  auto model = build_model<float>(spec, InitScheme{InitKind::Normal}, 31);
  // Give the buffers distinctive values so WithBuffer differs from batch stats.
  for (auto& b : model.bn) {
    b.running_mean.setConstant(0.1f);
    b.running_var.setConstant(0.8f);
  }
  // A shuffled copy of the same test set.
  std::vector<int> perm(static_cast<std::size_t>(ds.size()));
  for (int i = 0; i < ds.size(); ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng(3);
  rng.shuffle(perm);
  const Dataset shuffled = ds.subset(perm);

  AttackConfig eval_attack{8.0 / 255, 4.0 / 255, 2, false};
  const double wb_a = evaluate_accuracy(model, ds, &eval_attack, BufferMode::WithBuffer, 16);
  const double wb_b = evaluate_accuracy(model, shuffled, &eval_attack, BufferMode::WithBuffer, 16);
  CHECK(wb_a == doctest::Approx(wb_b).epsilon(1e-12));  // same set, batch split irrelevant

  const double wo_a = evaluate_accuracy(model, ds, &eval_attack, BufferMode::WithoutBuffer, 16);
  const double wo_b = evaluate_accuracy(model, shuffled, &eval_attack, BufferMode::WithoutBuffer, 16);
  // Batch statistics change with composition; identical accuracy on every
  // split would be a coincidence we do not expect at this scale.
  CHECK(wo_a != wo_b);
}

TEST_SUITE_END();
