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
#include "ntklab/theory.hpp"

#include <cmath>

namespace ntklab {

namespace {

TracedKernel traced_from_blocks(const std::vector<MatRMd>& blocks) {
  TracedKernel t;
  t.matrix = blocks[0];
  for (std::size_t i = 1; i < blocks.size(); ++i) t.matrix += blocks[i];
  t.matrix /= static_cast<double>(blocks.size());
  return t;
}

double relative_shift(const ModelState<double>& state, const Tensor<double>& base,
                      const Tensor<double>& perturbed, const TracedKernel& base_traced, double base_norm) {
  const auto cross = compute_cross_entk(state, perturbed, base);
  const auto t = traced_from_blocks(cross);
  return (t.matrix - base_traced.matrix).norm() / base_norm;
}

}  // namespace

Thm1Report theorem1_shift(const ModelState<double>& state, const Tensor<double>& probe_x,
                          const std::vector<int>& probe_labels, const std::vector<double>& epsilons,
                          int trials, std::uint64_t seed) {
  bool has_zero = false;
  for (double e : epsilons) {
    if (e == 0.0) has_zero = true;
    if (e < 0.0) throw ValidationError("thm1: negative epsilon");
  }
  if (!has_zero) throw ValidationError("thm1: the epsilon grid must include 0");
  if (trials < 1) throw ValidationError("thm1: trials must be >= 1");

  Thm1Report report;
  report.epsilons = epsilons;
  report.trials = trials;

  const auto base_blocks = compute_cross_entk(state, probe_x, probe_x);
  const TracedKernel base = traced_from_blocks(base_blocks);
  const double base_norm = base.matrix.norm();
  if (base_norm == 0.0) throw NumericFault("thm1: zero base kernel");

  // Coupled contrast curve: Omega = eps * sign(grad_x CE) (deterministic).
  auto [lv, gx] = grad_input(state, probe_x, LossSpec<double>::ce(probe_labels), Phase::Eval);
  (void)lv;

  for (std::size_t ei = 0; ei < epsilons.size(); ++ei) {
    const double eps = epsilons[ei];
    std::vector<double> per_trial;
    for (int t = 0; t < trials; ++t) {
      if (eps == 0.0) {
        per_trial.push_back(relative_shift(state, probe_x, probe_x, base, base_norm));
        continue;
      }
      Rng rng = Rng::stream(seed, 0xA000u + static_cast<std::uint64_t>(ei) * 1000u + static_cast<std::uint64_t>(t));
      Tensor<double> perturbed = probe_x;
      for (Eigen::Index i = 0; i < perturbed.size(); ++i) {
        perturbed[i] += rng.bernoulli(report.p) ? eps : -eps;
      }
      per_trial.push_back(relative_shift(state, probe_x, perturbed, base, base_norm));
    }
    report.shifts.push_back(std::move(per_trial));

    Tensor<double> coupled = probe_x;
    for (Eigen::Index i = 0; i < coupled.size(); ++i) coupled[i] += eps * sign0(gx[i]);
    report.coupled_shifts.push_back(eps == 0.0 ? 0.0
                                               : relative_shift(state, probe_x, coupled, base, base_norm));
  }

  // log-log slope over the positive part of the grid.
  const auto means = report.mean_shifts();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    if (epsilons[i] <= 0.0 || means[i] <= 0.0) continue;
    const double lx = std::log(epsilons[i]), ly = std::log(means[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  if (n >= 2) report.loglog_slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return report;
}

namespace {

double f_eval(FKind kind, double x) { return kind == FKind::Identity ? x : std::tanh(x); }

}  // namespace

Thm2Trial theorem2_bound_once(FKind f_kind, const std::vector<double>& x_values, int alpha, int k,
                              AVariant variant) {
  if (alpha < 2) throw ValidationError("thm2: alpha must be >= 2");
  if (k < 1) throw ValidationError("thm2: k must be >= 1");
  if (static_cast<int>(x_values.size()) < alpha * k)
    throw ValidationError("thm2: need at least k*alpha values");
  constexpr double kDegenerate = 1e-8;
  const double c_lip = 1.0;

  std::vector<double> s1(static_cast<std::size_t>(k)), s2(static_cast<std::size_t>(k));
  std::vector<double> sub_mean(static_cast<std::size_t>(k)), sub_std(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    double a = 0.0, b = 0.0;
    for (int j = 0; j < alpha; ++j) {
      const double v = x_values[static_cast<std::size_t>(i * alpha + j)];
      a += v;
      b += v * v;
    }
    s1[static_cast<std::size_t>(i)] = a;
    s2[static_cast<std::size_t>(i)] = b;
    const double mean = a / alpha;
    const double var = std::max(0.0, b / alpha - mean * mean);
    sub_mean[static_cast<std::size_t>(i)] = mean;
    sub_std[static_cast<std::size_t>(i)] = std::sqrt(var);
    if (sub_std[static_cast<std::size_t>(i)] <= kDegenerate)
      throw ValidationError("thm2: degenerate subset (near-zero standard variance)");
  }

  double e_s1 = 0.0, e_a = 0.0, sigma = 0.0, e_pi2 = 0.0;
  for (int i = 0; i < k; ++i) {
    e_s1 += s1[static_cast<std::size_t>(i)];
    const double a_i = variant == AVariant::Statement
                           ? s2[static_cast<std::size_t>(i)] - s1[static_cast<std::size_t>(i)] * s1[static_cast<std::size_t>(i)]
                           : alpha * s2[static_cast<std::size_t>(i)] -
                                 s1[static_cast<std::size_t>(i)] * s1[static_cast<std::size_t>(i)];
    e_a += a_i;
    sigma += sub_mean[static_cast<std::size_t>(i)];
    e_pi2 += sub_std[static_cast<std::size_t>(i)] * sub_std[static_cast<std::size_t>(i)];
  }
  e_s1 /= k;
  e_a /= k;
  sigma /= k;
  e_pi2 /= k;
  const double pi = std::sqrt(static_cast<double>(alpha) / (alpha - 1) * e_pi2);

  Thm2Trial trial;
  if (e_a <= 0.0) {
    trial.infeasible = true;  // sqrt(E(A)) undefined; flagged, not a crash
    return trial;
  }
  const double sqrt_ea = std::sqrt(e_a);

  double margin_min = std::numeric_limits<double>::infinity();
  double lhs_max = 0.0;
  for (int i = 0; i < k; ++i) {
    const double mean_i = sub_mean[static_cast<std::size_t>(i)];
    const double std_i = sub_std[static_cast<std::size_t>(i)];
    for (int j = 0; j < alpha; ++j) {
      const double x = x_values[static_cast<std::size_t>(i * alpha + j)];
      const double lhs = std::abs(f_eval(f_kind, (x - mean_i) / std_i) - f_eval(f_kind, (x - sigma) / pi));
      const double rhs = c_lip * std::abs(x) * (1.0 / std_i + alpha / sqrt_ea) +
                         c_lip * (std::abs(mean_i) / std_i + std::abs(e_s1) / sqrt_ea);
      margin_min = std::min(margin_min, rhs - lhs);
      lhs_max = std::max(lhs_max, lhs);
    }
  }
  trial.margin_min = margin_min;
  trial.lhs_max = lhs_max;
  return trial;
}

Thm2Report theorem2_check(FKind f_kind, int alpha, int k, int trials, std::uint64_t seed, AVariant variant) {
  Thm2Report report;
  report.variant = variant;
  report.f_kind = f_kind;
  report.alpha = alpha;
  report.k = k;
  for (int t = 0; t < trials; ++t) {
    Rng rng = Rng::stream(seed, 0xB000u + static_cast<std::uint64_t>(t));
    std::vector<double> x(static_cast<std::size_t>(alpha * k));
    for (auto& v : x) v = rng.normal();
    const auto trial = theorem2_bound_once(f_kind, x, alpha, k, variant);
    if (trial.infeasible) {
      ++report.infeasible_count;
    } else if (trial.margin_min < -1e-10) {
      ++report.violations;
    }
    report.trials.push_back(trial);
  }
  return report;
}

BufferSwapReport proposition_buffer_swap(const ModelState<float>& model, const Dataset& test,
                                         const AttackConfig& eval_attack, int batch_size, std::uint64_t seed) {
  BufferSwapReport report;
  report.clean_with_buffer = evaluate_accuracy(model, test, nullptr, BufferMode::WithBuffer, batch_size);
  report.clean_without_buffer = evaluate_accuracy(model, test, nullptr, BufferMode::WithoutBuffer, batch_size);
  Rng r1 = Rng::stream(seed, 0xC001), r2 = Rng::stream(seed, 0xC001);  // same draws for both modes
  report.robust_with_buffer =
      evaluate_accuracy(model, test, &eval_attack, BufferMode::WithBuffer, batch_size, &r1);
  report.robust_without_buffer =
      evaluate_accuracy(model, test, &eval_attack, BufferMode::WithoutBuffer, batch_size, &r2);
  return report;
}

}  // namespace ntklab
