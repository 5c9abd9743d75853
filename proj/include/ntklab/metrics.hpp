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

#include "ntklab/attacks.hpp"

namespace ntklab {

/// The n_out diagonal ENTK class blocks over one probe, each N x N, 64-bit,
/// with the probe identity and labels the KS metric consumes.
struct ClassKernel {
  std::vector<MatRMd> blocks;
  std::vector<std::uint32_t> probe_ids;
  std::vector<int> clean_labels;  // CL: ground-truth labels
  std::vector<int> adv_labels;    // AL: model predictions on the AEs; empty for clean kernels

  int n() const { return blocks.empty() ? 0 : static_cast<int>(blocks[0].rows()); }
  int n_out() const { return static_cast<int>(blocks.size()); }
  bool has_adv_labels() const { return !adv_labels.empty(); }
};

struct TracedKernel {
  MatRMd matrix;  // mean over the class blocks
};

enum class LabelSource { CL, AL };

struct KsMatrix {
  MatRMd matrix;  // n_out x n_out specialization strengths
  LabelSource source = LabelSource::CL;
  std::vector<int> dropped_columns;  // columns with no samples under the labels
};

struct EntkOptions {
  std::size_t budget_bytes = jacobian_budget_bytes();
};

/// ENTK class blocks on a probe. Adversarial mode first regenerates AEs from
/// the probe with `attack` under the current parameters and records AL.
/// Blocks accumulate in 64-bit; falls back to streaming strip products when
/// N*P exceeds the budget.
ClassKernel compute_entk(const ModelState<double>& state, const Tensor<double>& probe_x,
                         const std::vector<int>& clean_labels, const std::vector<std::uint32_t>& probe_ids,
                         const AttackConfig* attack = nullptr, Rng* attack_rng = nullptr,
                         GradEvalCounter* counter = nullptr, const EntkOptions& opts = {});

/// Cross blocks J_i(X1) * J_i(X2)^T, one per class; not symmetric in general.
std::vector<MatRMd> compute_cross_entk(const ModelState<double>& state, const Tensor<double>& x1,
                                       const Tensor<double>& x2, const EntkOptions& opts = {});

TracedKernel traced_kernel(const ClassKernel& k);

/// KD = 1 - Tr(K1^T K2) / (||K1||_F ||K2||_F). Zero-norm inputs are an error.
double kernel_distance(const MatRMd& k1, const MatRMd& k2);

struct EigResult {
  Vecd values;  // descending; tiny negatives (>= -1e-8 * sigma_max) clamped to 0
  double raw_min = 0.0;
  bool negative_flagged = false;  // an eigenvalue fell below -1e-8 * sigma_max
};

/// Eigenvalues of (K + K^T)/2 by cyclic Jacobi rotations; off-diagonal norm
/// tolerance 1e-12 * ||K||_F, 100-sweep cap.
EigResult sym_eigvals(const MatRMd& k);

/// exp(-sum p_i log p_i) over the normalized spectrum; eigenvalues below
/// 1e-12 * sigma_1 are excluded. All-zero spectra are an error.
double effective_rank(const MatRMd& k);

/// A(K, Y_j Y_j^T) = Tr(K^T Y_j Y_j^T) / (||K||_F * c_j) with c_j the class-j
/// count. Empty classes are an error.
double alignment(const MatRMd& k, const std::vector<int>& labels, int class_j);

/// M[i][j] = A(block_i, Y_j Y_j^T) normalized by the mean over i; columns for
/// classes empty under the chosen labels are dropped and recorded.
KsMatrix ks_matrix(const ClassKernel& k, LabelSource source);

/// KS = mean of the diagonal over retained columns.
double kernel_specialization(const KsMatrix& m);

struct BlockHealth {
  double symmetry_rel = 0.0;  // ||K - K^T||_F / ||K||_F
  double eig_min = 0.0;
  double eig_max = 0.0;
};

BlockHealth check_block(const MatRMd& k);

}  // namespace ntklab
