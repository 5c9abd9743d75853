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
#include "ntklab/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace ntklab {

namespace {

Tensor<double> slice_rows(const Tensor<double>& x, int begin, int end) {
  const int c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Eigen::Index stride = static_cast<Eigen::Index>(c) * h * w;
  Tensor<double> out({end - begin, c, h, w});
  out.data() = x.data().segment(static_cast<Eigen::Index>(begin) * stride,
                                static_cast<Eigen::Index>(end - begin) * stride);
  return out;
}

void mirror_lower(MatRMd& k) {
  for (Eigen::Index r = 0; r < k.rows(); ++r) {
    for (Eigen::Index c = r + 1; c < k.cols(); ++c) k(r, c) = k(c, r);
  }
}

/// One class block J * J^T, streamed over row strips when J does not fit.
MatRMd class_block(const ModelState<double>& state, const Tensor<double>& x, int cls,
                   const FrozenBnStats<double>* frozen, std::size_t budget) {
  const int n = x.dim(0);
  const Eigen::Index p = state.params.size();
  const std::size_t full_bytes = static_cast<std::size_t>(n) * static_cast<std::size_t>(p) * sizeof(double);
  MatRMd k(n, n);
  if (full_bytes <= budget) {
    const MatRMd jac = per_sample_param_jacobian(state, x, cls, frozen, budget);
    k.setZero();
    k.selfadjointView<Eigen::Lower>().rankUpdate(jac, 1.0);
    mirror_lower(k);
    return k;
  }
  // Strip size chosen so two strips fit the budget.
  std::size_t strip = budget / (2 * static_cast<std::size_t>(p) * sizeof(double));
  strip = std::max<std::size_t>(kChunk, strip - strip % kChunk);
  for (int a = 0; a < n; a += static_cast<int>(strip)) {
    const int a_end = std::min(n, a + static_cast<int>(strip));
    const MatRMd ja = per_sample_param_jacobian(state, slice_rows(x, a, a_end), cls, frozen, budget);
    MatRMd diag(a_end - a, a_end - a);
    diag.setZero();
    diag.selfadjointView<Eigen::Lower>().rankUpdate(ja, 1.0);
    mirror_lower(diag);
    k.block(a, a, a_end - a, a_end - a) = diag;
    for (int b = a_end; b < n; b += static_cast<int>(strip)) {
      const int b_end = std::min(n, b + static_cast<int>(strip));
      const MatRMd jb = per_sample_param_jacobian(state, slice_rows(x, b, b_end), cls, frozen, budget);
      k.block(a, b, a_end - a, b_end - b).noalias() = ja * jb.transpose();
      k.block(b, a, b_end - b, a_end - a) = k.block(a, b, a_end - a, b_end - b).transpose();
    }
  }
  return k;
}

}  // namespace

ClassKernel compute_entk(const ModelState<double>& state, const Tensor<double>& probe_x,
                         const std::vector<int>& clean_labels, const std::vector<std::uint32_t>& probe_ids,
                         const AttackConfig* attack, Rng* attack_rng, GradEvalCounter* counter,
                         const EntkOptions& opts) {
  const int n = probe_x.dim(0);
  if (static_cast<int>(clean_labels.size()) != n || static_cast<int>(probe_ids.size()) != n)
    throw ValidationError("entk: probe labels/ids do not match the probe size");

  ClassKernel out;
  out.probe_ids = probe_ids;
  out.clean_labels = clean_labels;

  Tensor<double> x = probe_x;
  if (attack != nullptr) {
    x = pgd(state, probe_x, clean_labels, *attack, attack_rng, counter);
    const auto logits = forward_logits(state, x, Phase::Eval);
    out.adv_labels.resize(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
      Eigen::Index arg;
      logits.row(j).maxCoeff(&arg);
      out.adv_labels[static_cast<std::size_t>(j)] = static_cast<int>(arg);
    }
  }

  FrozenBnStats<double> frozen;
  const FrozenBnStats<double>* fz = nullptr;
  if (!state.bn.empty()) {
    frozen = capture_eval_bn_stats(state, x);
    fz = &frozen;
  }
  out.blocks.reserve(static_cast<std::size_t>(state.spec.n_out));

  const Eigen::Index p = state.params.size();
  const std::size_t full_bytes = static_cast<std::size_t>(n) * static_cast<std::size_t>(p) * sizeof(double);
  if (full_bytes > opts.budget_bytes) {
    // Streaming strip products; forwards are recomputed per strip.
    for (int i = 0; i < state.spec.n_out; ++i) {
      out.blocks.push_back(class_block(state, x, i, fz, opts.budget_bytes));
    }
    return out;
  }

  // In-memory path: one forward per probe chunk, shared across all classes.
  const std::size_t nchunks = chunk_count(static_cast<std::size_t>(n));
  std::vector<ComputationRecord<double>> recs(nchunks);
  parallel_chunks(static_cast<std::size_t>(n), [&](std::size_t c, std::size_t begin, std::size_t end) {
    recs[c] = run_forward(state, slice_rows(x, static_cast<int>(begin), static_cast<int>(end)), Phase::Eval, fz);
  });
  MatRMd jac(n, p);
  for (int i = 0; i < state.spec.n_out; ++i) {
    parallel_chunks(static_cast<std::size_t>(n), [&](std::size_t c, std::size_t begin, std::size_t) {
      backward_per_sample(state, recs[c], i, jac, static_cast<Eigen::Index>(begin));
    });
    if (!jac.allFinite()) throw NumericFault("entk: non-finite jacobian entries");
    MatRMd block(n, n);
    block.setZero();
    block.selfadjointView<Eigen::Lower>().rankUpdate(jac, 1.0);
    mirror_lower(block);
    out.blocks.push_back(std::move(block));
  }
  return out;
}

std::vector<MatRMd> compute_cross_entk(const ModelState<double>& state, const Tensor<double>& x1,
                                       const Tensor<double>& x2, const EntkOptions& opts) {
  FrozenBnStats<double> fz1, fz2;
  const FrozenBnStats<double>*p1 = nullptr, *p2 = nullptr;
  if (!state.bn.empty()) {
    fz1 = capture_eval_bn_stats(state, x1);
    fz2 = capture_eval_bn_stats(state, x2);
    p1 = &fz1;
    p2 = &fz2;
  }
  std::vector<MatRMd> blocks;
  blocks.reserve(static_cast<std::size_t>(state.spec.n_out));
  for (int i = 0; i < state.spec.n_out; ++i) {
    const MatRMd j1 = per_sample_param_jacobian(state, x1, i, p1, opts.budget_bytes);
    const MatRMd j2 = per_sample_param_jacobian(state, x2, i, p2, opts.budget_bytes);
    MatRMd b;
    b.noalias() = j1 * j2.transpose();
    blocks.push_back(std::move(b));
  }
  return blocks;
}

TracedKernel traced_kernel(const ClassKernel& k) {
  if (k.blocks.empty()) throw ValidationError("traced kernel: no blocks");
  TracedKernel t;
  t.matrix = k.blocks[0];
  for (std::size_t i = 1; i < k.blocks.size(); ++i) t.matrix += k.blocks[i];
  t.matrix /= static_cast<double>(k.blocks.size());
  return t;
}

double kernel_distance(const MatRMd& k1, const MatRMd& k2) {
  if (k1.rows() != k2.rows() || k1.cols() != k2.cols())
    throw ValidationError("kernel distance: shape mismatch");
  const double n1 = k1.norm(), n2 = k2.norm();
  if (n1 == 0.0 || n2 == 0.0) throw ValidationError("kernel distance: undefined for a zero-norm kernel");
  const double inner = k1.cwiseProduct(k2).sum();
  return 1.0 - inner / (n1 * n2);
}

EigResult sym_eigvals(const MatRMd& k_in) {
  if (k_in.rows() != k_in.cols()) throw ValidationError("eig: matrix must be square");
  MatRMd a = 0.5 * (k_in + k_in.transpose());
  const Eigen::Index n = a.rows();
  const double fro = a.norm();
  const double tol = 1e-12 * fro;
  constexpr int kMaxSweeps = 100;

  bool converged = (n < 2) || fro == 0.0;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += 2.0 * a(p, q) * a(p, q);
    if (std::sqrt(off) <= tol) {
      converged = true;
      break;
    }
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= tol / static_cast<double>(n)) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        // A <- J^T A J on rows/cols p and q.
        for (Eigen::Index i = 0; i < n; ++i) {
          const double aip = a(i, p), aiq = a(i, q);
          a(i, p) = c * aip - s * aiq;
          a(i, q) = s * aip + c * aiq;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const double api = a(p, i), aqi = a(q, i);
          a(p, i) = c * api - s * aqi;
          a(q, i) = s * api + c * aqi;
        }
      }
    }
  }
  if (!converged) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += 2.0 * a(p, q) * a(p, q);
    if (std::sqrt(off) > tol) throw NumericFault("eig: Jacobi sweeps did not converge");
  }

  EigResult out;
  out.values = a.diagonal();
  std::sort(out.values.data(), out.values.data() + n, std::greater<double>());
  out.raw_min = n > 0 ? out.values[n - 1] : 0.0;
  double sigma_max = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) sigma_max = std::max(sigma_max, std::abs(out.values[i]));
  const double clamp_floor = -1e-8 * sigma_max;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (out.values[i] < clamp_floor) {
      out.negative_flagged = true;
    } else if (out.values[i] < 0.0) {
      out.values[i] = 0.0;
    }
  }
  return out;
}

double effective_rank(const MatRMd& k) {
  const EigResult eig = sym_eigvals(k);
  if (eig.values.size() == 0) throw ValidationError("effective rank: empty spectrum");
  const double top = eig.values[0];
  if (top <= 0.0) throw ValidationError("effective rank: undefined for an all-zero spectrum");
  const double cutoff = 1e-12 * top;
  double total = 0.0;
  for (Eigen::Index i = 0; i < eig.values.size(); ++i)
    if (eig.values[i] > cutoff) total += eig.values[i];
  double entropy = 0.0;
  for (Eigen::Index i = 0; i < eig.values.size(); ++i) {
    if (eig.values[i] > cutoff) {
      const double p = eig.values[i] / total;
      entropy -= p * std::log(p);
    }
  }
  return std::exp(entropy);
}

double alignment(const MatRMd& k, const std::vector<int>& labels, int class_j) {
  if (static_cast<Eigen::Index>(labels.size()) != k.rows())
    throw ValidationError("alignment: label count does not match the kernel size");
  std::vector<Eigen::Index> members;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == class_j) members.push_back(static_cast<Eigen::Index>(i));
  if (members.empty())
    throw ValidationError("alignment: class " + std::to_string(class_j) + " has no samples");
  const double fro = k.norm();
  if (fro == 0.0) throw ValidationError("alignment: undefined for a zero-norm kernel");
  double s = 0.0;
  for (const auto a : members)
    for (const auto b : members) s += k(a, b);
  // ||Y_j Y_j^T||_F = c_j for a 0/1 indicator with c_j ones.
  return s / (fro * static_cast<double>(members.size()));
}

KsMatrix ks_matrix(const ClassKernel& k, LabelSource source) {
  const int n_out = k.n_out();
  const std::vector<int>* labels = nullptr;
  if (source == LabelSource::CL) {
    labels = &k.clean_labels;
  } else {
    if (!k.has_adv_labels()) throw ValidationError("ks: kernel carries no adversarial labels");
    labels = &k.adv_labels;
  }
  KsMatrix out;
  out.source = source;
  out.matrix.setZero(n_out, n_out);
  for (int j = 0; j < n_out; ++j) {
    const bool empty = std::none_of(labels->begin(), labels->end(), [&](int v) { return v == j; });
    if (empty) {
      out.dropped_columns.push_back(j);
      continue;
    }
    Vecd a(n_out);
    for (int i = 0; i < n_out; ++i) a[i] = alignment(k.blocks[static_cast<std::size_t>(i)], *labels, j);
    const double mean = a.mean();
    if (mean == 0.0) {
      out.dropped_columns.push_back(j);
      continue;
    }
    out.matrix.col(j) = a / mean;
  }
  return out;
}

double kernel_specialization(const KsMatrix& m) {
  const int n_out = static_cast<int>(m.matrix.rows());
  double trace = 0.0;
  int kept = 0;
  for (int j = 0; j < n_out; ++j) {
    if (std::find(m.dropped_columns.begin(), m.dropped_columns.end(), j) != m.dropped_columns.end()) continue;
    trace += m.matrix(j, j);
    ++kept;
  }
  if (kept == 0) throw ValidationError("ks: every column was dropped");
  return trace / static_cast<double>(kept);
}

BlockHealth check_block(const MatRMd& k) {
  BlockHealth h;
  const double fro = k.norm();
  h.symmetry_rel = fro == 0.0 ? 0.0 : (k - MatRMd(k.transpose())).norm() / fro;
  const EigResult eig = sym_eigvals(k);
  h.eig_min = eig.raw_min;
  h.eig_max = eig.values.size() > 0 ? eig.values[0] : 0.0;
  return h;
}

}  // namespace ntklab
