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

// Test-side oracles. These depend only on the forward pass (finite
// differences) or on scalar loops, never on the backward implementation they
// check.

#include "ntklab/autodiff.hpp"

namespace ntklab::testing {

inline constexpr double kFdStep = 1e-5;

/// Central finite differences of the batch-mean loss w.r.t. every parameter.
inline Vecd fd_grad_params(const ModelState<double>& state, const Tensor<double>& x, const LossSpec<double>& loss,
                           Phase phase, double h = kFdStep) {
  ModelState<double> probe = state;
  Vecd g(state.params.size());
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    const double orig = probe.params.data()[k];
    probe.params.data()[k] = orig + h;
    const double up = loss.evaluate(run_forward(probe, x, phase).logits()).loss;
    probe.params.data()[k] = orig - h;
    const double dn = loss.evaluate(run_forward(probe, x, phase).logits()).loss;
    probe.params.data()[k] = orig;
    g[k] = (up - dn) / (2.0 * h);
  }
  return g;
}

/// Central finite differences w.r.t. selected input coordinates.
inline Vecd fd_grad_input_coords(const ModelState<double>& state, const Tensor<double>& x,
                                 const LossSpec<double>& loss, Phase phase,
                                 const std::vector<Eigen::Index>& coords, double h = kFdStep) {
  Tensor<double> probe = x;
  Vecd g(static_cast<Eigen::Index>(coords.size()));
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const Eigen::Index k = coords[i];
    const double orig = probe[k];
    probe[k] = orig + h;
    const double up = loss.evaluate(run_forward(state, probe, phase).logits()).loss;
    probe[k] = orig - h;
    const double dn = loss.evaluate(run_forward(state, probe, phase).logits()).loss;
    probe[k] = orig;
    g[static_cast<Eigen::Index>(i)] = (up - dn) / (2.0 * h);
  }
  return g;
}

inline double rel_error(const Vecd& a, const Vecd& b) {
  const double denom = std::max(b.norm(), 1e-12);
  return (a - b).norm() / denom;
}

/// Smallest |pre-activation| feeding any ReLU, to reject finite-difference
/// cases that straddle a kink.
inline double min_relu_margin(const ModelState<double>& state, const Tensor<double>& x, Phase phase) {
  const auto rec = run_forward(state, x, phase);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < state.spec.layers.size(); ++i) {
    if (state.spec.layers[i].kind == LayerKind::Relu) {
      margin = std::min(margin, rec.acts[i].m.array().abs().minCoeff());
    }
  }
  return margin;
}

/// Uniform random image batch in [lo, hi].
inline Tensor<double> random_batch(Rng& rng, int n, int c, int h, int w, double lo = 0.0, double hi = 1.0) {
  Tensor<double> x({n, c, h, w});
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = rng.uniform(lo, hi);
  return x;
}

inline std::vector<int> random_labels(Rng& rng, int n, int n_out) {
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = static_cast<int>(rng.uniform_int(0, n_out - 1));
  return y;
}

}  // namespace ntklab::testing
