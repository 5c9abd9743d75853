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

#include "ntklab/metrics.hpp"

namespace ntklab {

/// Relative traced-kernel shift under iid sign perturbations of the probe:
/// r(eps) = ||traced(Theta(X+Omega, X)) - traced(Theta(X, X))||_F / ||...||_F.
struct Thm1Report {
  std::vector<double> epsilons;
  std::vector<std::vector<double>> shifts;   // [eps][trial], Omega iid +-eps with p = 1/2
  std::vector<double> coupled_shifts;        // per eps, Omega = eps * sign(grad_x CE); contrast only
  int trials = 0;
  double p = 0.5;
  double loglog_slope = 0.0;  // least-squares fit of log mean-r against log eps over eps > 0

  std::vector<double> mean_shifts() const {
    std::vector<double> m;
    for (const auto& v : shifts) {
      double s = 0.0;
      for (double r : v) s += r;
      m.push_back(v.empty() ? 0.0 : s / static_cast<double>(v.size()));
    }
    return m;
  }
};

/// Sign perturbations are applied without [0,1] clipping, matching the
/// theorem's perturbation model (the paper drops the clipping step there).
Thm1Report theorem1_shift(const ModelState<double>& state, const Tensor<double>& probe_x,
                          const std::vector<int>& probe_labels, const std::vector<double>& epsilons,
                          int trials, std::uint64_t seed);

enum class FKind { Identity, Tanh };  // both 1-Lipschitz

enum class AVariant { Statement, ProofConsistent };

struct Thm2Trial {
  double margin_min = 0.0;  // min over subsets and elements of RHS - LHS
  double lhs_max = 0.0;
  bool infeasible = false;  // E(A) <= 0 under the Statement variant
};

struct Thm2Report {
  AVariant variant = AVariant::ProofConsistent;
  FKind f_kind = FKind::Identity;
  int alpha = 0, k = 0;
  double lipschitz = 1.0;
  std::vector<Thm2Trial> trials;
  int violations = 0;         // margin_min < -1e-10 on a feasible trial
  int infeasible_count = 0;
};

/// The bound on one explicit input set (uses the first k*alpha values).
/// Sigma/Pi follow the appendix relationships Sigma = E(Sigma_i),
/// Pi = sqrt(alpha/(alpha-1) * E(Pi_i^2)); E(A) per the chosen variant:
/// Statement A = S2 - (S1)^2 (may go negative -> infeasible flag),
/// ProofConsistent A = alpha*S2 - (S1)^2 (= alpha^2 * batch variance >= 0).
Thm2Trial theorem2_bound_once(FKind f_kind, const std::vector<double>& x_values, int alpha, int k,
                              AVariant variant);

/// Repeats the bound over `trials` fresh standard-normal populations.
Thm2Report theorem2_check(FKind f_kind, int alpha, int k, int trials, std::uint64_t seed, AVariant variant);

/// Clean and robust test accuracy in both BN evaluation modes, plus gaps.
struct BufferSwapReport {
  double clean_with_buffer = 0.0;
  double clean_without_buffer = 0.0;
  double robust_with_buffer = 0.0;
  double robust_without_buffer = 0.0;

  double delta_clean() const { return clean_with_buffer - clean_without_buffer; }
  double delta_robust() const { return robust_with_buffer - robust_without_buffer; }
};

BufferSwapReport proposition_buffer_swap(const ModelState<float>& model, const Dataset& test,
                                         const AttackConfig& eval_attack, int batch_size, std::uint64_t seed);

}  // namespace ntklab
