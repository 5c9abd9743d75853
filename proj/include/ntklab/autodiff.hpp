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

#include "ntklab/layers.hpp"

namespace ntklab {

/// Entry indices into the ParamVector layout, one per layer.
struct LayerParamIndex {
  int weight = -1, bias = -1, gamma = -1, beta = -1;
};

inline std::vector<LayerParamIndex> map_layer_params(const ModelSpec& spec) {
  std::vector<LayerParamIndex> idx(spec.layers.size());
  int entry = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::Conv2d:
      case LayerKind::Linear:
        idx[i].weight = entry++;
        if (l.bias) idx[i].bias = entry++;
        break;
      case LayerKind::BatchNorm:
        idx[i].gamma = entry++;
        idx[i].beta = entry++;
        break;
      default:
        break;
    }
  }
  return idx;
}

/// Replayable record of one forward pass: the ordered per-layer activations
/// plus the BN statistics each application actually used.
template <typename S>
struct ComputationRecord {
  Phase phase = Phase::Eval;
  int n = 0;
  std::vector<Act<S>> acts;           // acts[i] = input of layer i; acts[L] = logits [N, n_out]
  std::vector<BnApplied<S>> bn_used;  // one per BatchNorm layer, in layer order

  const MatRM<S>& logits() const { return acts.back().m; }
};

/// BN statistics captured once and treated as constants, so Jacobians are a
/// function of (params, probe) only. WithBuffer models freeze the buffers;
/// WithoutBuffer models freeze the probe batch's own statistics.
template <typename S>
struct FrozenBnStats {
  std::vector<Vec<S>> mean;
  std::vector<Vec<S>> var;
};

/// One forward pass. `phase` selects the BN statistics source:
///   Train            -- batch statistics (buffers updated iff `buffer_update`
///                       is non-null and the model is WithBuffer);
///   Eval, WithBuffer -- running buffers;
///   Eval, WithoutBuffer -- the evaluated batch's own statistics.
/// `frozen` overrides the BN statistics entirely (Jacobian path).
template <typename S>
ComputationRecord<S> run_forward(const ModelState<S>& state, const Tensor<S>& x, Phase phase,
                                 const FrozenBnStats<S>* frozen = nullptr,
                                 std::vector<BatchNormState<S>>* buffer_update = nullptr) {
  const ModelSpec& spec = state.spec;
  const auto stages = spec.infer_stages();
  const auto pidx = map_layer_params(spec);
  if (x.shape().size() != 4 || x.dim(1) != spec.in_ch || x.dim(2) != spec.in_h || x.dim(3) != spec.in_w) {
    throw ValidationError(spec.name + ": input shape " + x.shape_string() + " does not match model input");
  }

  ComputationRecord<S> rec;
  rec.phase = phase;
  rec.n = x.dim(0);
  rec.acts.reserve(spec.layers.size() + 1);
  rec.acts.push_back(act_from_batch(x));

  int bn_idx = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const Act<S>& in = rec.acts.back();
    switch (l.kind) {
      case LayerKind::Conv2d: {
        const ConvGeom g = conv_geom(l, stages[i], stages[i + 1]);
        Act<S> out = Act<S>::spatial_zero(in.n, g.out_c, g.out_h, g.out_w);
        const auto& we = state.params.layout()[pidx[i].weight];
        Eigen::Map<const MatRM<S>> weight(state.params.data().data() + we.offset, g.out_c, g.patch_rows());
        const S* bias = nullptr;
        if (pidx[i].bias >= 0) bias = state.params.data().data() + state.params.layout()[pidx[i].bias].offset;
        conv_forward(g, weight, bias, in, out);
        rec.acts.push_back(std::move(out));
        break;
      }
      case LayerKind::Linear: {
        const auto& we = state.params.layout()[pidx[i].weight];
        Eigen::Map<const MatRM<S>> weight(state.params.data().data() + we.offset, l.out, stages[i].f);
        Act<S> out = Act<S>::flat_zero(in.n, l.out);
        out.m.noalias() = in.m * weight.transpose();
        if (pidx[i].bias >= 0) {
          const auto& be = state.params.layout()[pidx[i].bias];
          out.m.rowwise() += Eigen::Map<const Vec<S>>(state.params.data().data() + be.offset, l.out).transpose();
        }
        rec.acts.push_back(std::move(out));
        break;
      }
      case LayerKind::BatchNorm: {
        const BatchNormState<S>& bst = state.bn[bn_idx];
        BnApplied<S> applied;
        applied.count = bn_stat_count(in);
        if (frozen != nullptr) {
          applied.mean = frozen->mean[bn_idx];
          applied.inv_std = (frozen->var[bn_idx].array() + bst.eps).rsqrt();
          applied.batch_stats = false;
        } else if (phase == Phase::Train) {
          Vec<S> mean, var;
          act_moments(in, mean, var);
          applied.mean = mean;
          applied.inv_std = (var.array() + bst.eps).rsqrt();
          applied.batch_stats = true;
          if (buffer_update != nullptr && state.buffer_mode == BufferMode::WithBuffer) {
            const Eigen::Index cnt = applied.count;
            if (cnt < 2) throw ValidationError("batchnorm: cannot form the unbiased variance from one value");
            const S corr = static_cast<S>(cnt) / static_cast<S>(cnt - 1);
            BatchNormState<S>& upd = (*buffer_update)[bn_idx];
            upd.running_mean = (S(1) - bst.momentum) * upd.running_mean + bst.momentum * mean;
            upd.running_var = (S(1) - bst.momentum) * upd.running_var + bst.momentum * (var * corr);
          }
        } else if (state.buffer_mode == BufferMode::WithBuffer) {
          applied.mean = bst.running_mean;
          applied.inv_std = (bst.running_var.array() + bst.eps).rsqrt();
          applied.batch_stats = false;
        } else {
          if (in.n < 2) throw ValidationError("batchnorm: degenerate variance, WithoutBuffer eval needs batch > 1");
          Vec<S> mean, var;
          act_moments(in, mean, var);
          applied.mean = mean;
          applied.inv_std = (var.array() + bst.eps).rsqrt();
          applied.batch_stats = true;
        }
        Act<S> out = in;  // copy, then normalize in place
        const auto& ge = state.params.layout()[pidx[i].gamma];
        const auto& be = state.params.layout()[pidx[i].beta];
        Eigen::Map<const Vec<S>> gamma(state.params.data().data() + ge.offset, ge.count());
        Eigen::Map<const Vec<S>> beta(state.params.data().data() + be.offset, be.count());
        bn_apply(out, applied.mean, applied.inv_std, gamma, beta);
        rec.acts.push_back(std::move(out));
        rec.bn_used.push_back(std::move(applied));
        ++bn_idx;
        break;
      }
      case LayerKind::Relu: {
        Act<S> out = in;
        out.m = out.m.cwiseMax(S(0));
        rec.acts.push_back(std::move(out));
        break;
      }
      case LayerKind::Tanh: {
        Act<S> out = in;
        out.m = out.m.array().tanh();
        rec.acts.push_back(std::move(out));
        break;
      }
      case LayerKind::Flatten: {
        const Eigen::Index hw = static_cast<Eigen::Index>(in.h) * in.w;
        Act<S> out = Act<S>::flat_zero(in.n, in.c * in.h * in.w);
        parallel_chunks(static_cast<std::size_t>(in.n), [&](std::size_t, std::size_t begin, std::size_t end) {
          for (std::size_t j = begin; j < end; ++j) {
            for (int c = 0; c < in.c; ++c) {
              out.m.block(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c) * hw, 1, hw) =
                  in.m.block(c, static_cast<Eigen::Index>(j) * hw, 1, hw);
            }
          }
        });
        rec.acts.push_back(std::move(out));
        break;
      }
      case LayerKind::GlobalAvgPool: {
        const Eigen::Index hw = static_cast<Eigen::Index>(in.h) * in.w;
        Act<S> out = Act<S>::flat_zero(in.n, in.c);
        const S inv = S(1) / static_cast<S>(hw);
        parallel_chunks(static_cast<std::size_t>(in.n), [&](std::size_t, std::size_t begin, std::size_t end) {
          for (std::size_t j = begin; j < end; ++j) {
            out.m.row(static_cast<Eigen::Index>(j)) =
                in.m.middleCols(static_cast<Eigen::Index>(j) * hw, hw).rowwise().sum().transpose() * inv;
          }
        });
        rec.acts.push_back(std::move(out));
        break;
      }
    }
  }
  return rec;
}

/// Captures the BN statistics an evaluation of X would use, as constants.
template <typename S>
FrozenBnStats<S> capture_eval_bn_stats(const ModelState<S>& state, const Tensor<S>& x) {
  FrozenBnStats<S> out;
  if (state.buffer_mode == BufferMode::WithBuffer) {
    for (const auto& b : state.bn) {
      out.mean.push_back(b.running_mean);
      out.var.push_back(b.running_var);
    }
    return out;
  }
  auto rec = run_forward(state, x, Phase::Eval);
  for (std::size_t i = 0; i < rec.bn_used.size(); ++i) {
    const auto& u = rec.bn_used[i];
    out.mean.push_back(u.mean);
    Vec<S> var = u.inv_std.array().square().inverse() - state.bn[i].eps;
    out.var.push_back(var.cwiseMax(S(0)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses. dlogits carries the 1/N batch-mean factor, so backward produces the
// gradient of the mean loss directly.
// ---------------------------------------------------------------------------
enum class LossKind { SoftmaxCrossEntropy, Mse };

template <typename S>
struct LossGrad {
  S loss = S(0);
  MatRM<S> dlogits;
  MatRM<S> probs;  // softmax outputs (CE only)
};

template <typename S>
MatRM<S> softmax_rows(const MatRM<S>& logits) {
  MatRM<S> p = logits;
  const Vec<S> row_max = p.rowwise().maxCoeff();
  p.colwise() -= row_max;
  p = p.array().exp();
  const Vec<S> row_sum = p.rowwise().sum();
  p.array().colwise() /= row_sum.array();
  return p;
}

template <typename S>
LossGrad<S> softmax_cross_entropy(const MatRM<S>& logits, const std::vector<int>& labels) {
  const Eigen::Index n = logits.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ValidationError("cross entropy: label count mismatch");
  LossGrad<S> out;
  out.probs = softmax_rows(logits);
  S loss = S(0);
  out.dlogits = out.probs;
  const S inv_n = S(1) / static_cast<S>(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    loss -= std::log(std::max(out.probs(j, y), std::numeric_limits<S>::min()));
    out.dlogits(j, y) -= S(1);
  }
  out.dlogits *= inv_n;
  out.loss = loss * inv_n;
  return out;
}

template <typename S>
LossGrad<S> mse_loss(const MatRM<S>& logits, const MatRM<S>& targets) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
    throw ValidationError("mse: target shape mismatch");
  LossGrad<S> out;
  const S inv_n = S(1) / static_cast<S>(logits.rows());
  MatRM<S> diff = logits - targets;
  out.loss = diff.squaredNorm() * inv_n;
  out.dlogits = diff * (S(2) * inv_n);
  return out;
}

/// Loss selector for the gradient entry points.
template <typename S>
struct LossSpec {
  LossKind kind = LossKind::SoftmaxCrossEntropy;
  std::vector<int> labels;  // CE
  MatRM<S> targets;         // MSE

  static LossSpec ce(std::vector<int> y) {
    LossSpec s;
    s.kind = LossKind::SoftmaxCrossEntropy;
    s.labels = std::move(y);
    return s;
  }
  static LossSpec mse(MatRM<S> t) {
    LossSpec s;
    s.kind = LossKind::Mse;
    s.targets = std::move(t);
    return s;
  }

  LossGrad<S> evaluate(const MatRM<S>& logits) const {
    return kind == LossKind::SoftmaxCrossEntropy ? softmax_cross_entropy(logits, labels)
                                                 : mse_loss(logits, targets);
  }
};

// ---------------------------------------------------------------------------
// Backward passes.
// ---------------------------------------------------------------------------

namespace detail {

/// BN backward shared by both sinks. `d` is the cotangent on the BN output;
/// on return it holds the cotangent on the BN input. dgamma/dbeta optional.
/// Batch-derived statistics get the full backward (the dmean/dvar coupling);
/// frozen or buffer statistics reduce BN to a per-channel affine map.
template <typename S>
void bn_backward_inplace(const Act<S>& in, const BnApplied<S>& applied, const Eigen::Map<const Vec<S>>& gamma,
                         MatRM<S>& d, Vec<S>* dgamma, Vec<S>* dbeta) {
  // xhat = (x - mean) * inv_std, recomputed from the stored layer input.
  if (in.spatial) {
    MatRM<S> xhat = ((in.m.colwise() - applied.mean).array().colwise() * applied.inv_std.array()).matrix();
    if (dgamma != nullptr) *dgamma = (d.array() * xhat.array()).matrix().rowwise().sum();
    if (dbeta != nullptr) *dbeta = d.rowwise().sum();
    if (applied.batch_stats) {
      const S m = static_cast<S>(applied.count);
      MatRM<S> dxhat = (d.array().colwise() * gamma.array()).matrix();
      const Vec<S> sum_dxhat = dxhat.rowwise().sum();
      const Vec<S> sum_dxhat_xhat = (dxhat.array() * xhat.array()).matrix().rowwise().sum();
      // dx = (inv_std/m) * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
      MatRM<S> dx = dxhat * m;
      dx.colwise() -= sum_dxhat;
      dx -= (xhat.array().colwise() * sum_dxhat_xhat.array()).matrix();
      d = (dx.array().colwise() * (applied.inv_std.array() / m)).matrix();
    } else {
      d = (d.array().colwise() * (gamma.cwiseProduct(applied.inv_std)).array()).matrix();
    }
  } else {
    MatRM<S> xhat =
        ((in.m.rowwise() - applied.mean.transpose()).array().rowwise() * applied.inv_std.transpose().array())
            .matrix();
    if (dgamma != nullptr) *dgamma = (d.array() * xhat.array()).matrix().colwise().sum().transpose();
    if (dbeta != nullptr) *dbeta = d.colwise().sum().transpose();
    if (applied.batch_stats) {
      const S m = static_cast<S>(applied.count);
      MatRM<S> dxhat = (d.array().rowwise() * gamma.transpose().array()).matrix();
      const Vec<S> sum_dxhat = dxhat.colwise().sum().transpose();
      const Vec<S> sum_dxhat_xhat = (dxhat.array() * xhat.array()).matrix().colwise().sum().transpose();
      MatRM<S> dx = dxhat * m;
      dx.rowwise() -= sum_dxhat.transpose();
      dx -= (xhat.array().rowwise() * sum_dxhat_xhat.transpose().array()).matrix();
      d = (dx.array().rowwise() * (applied.inv_std.transpose().array() / m)).matrix();
    } else {
      d = (d.array().rowwise() * (gamma.cwiseProduct(applied.inv_std)).transpose().array()).matrix();
    }
  }
}

}  // namespace detail

template <typename S>
struct BackwardResult {
  ParamVector<S> param_grads;  // empty unless requested; summed per dlogits scaling
  Tensor<S> input_grad;        // empty unless requested
};

/// Reverse pass over a recorded forward. `dlogits` is the cotangent on the
/// output [N, n_out]; any batch-mean factor belongs to the caller.
template <typename S>
BackwardResult<S> backward(const ModelState<S>& state, const ComputationRecord<S>& rec, const MatRM<S>& dlogits,
                           bool want_param_grads, bool want_input_grad) {
  const ModelSpec& spec = state.spec;
  const auto stages = spec.infer_stages();
  const auto pidx = map_layer_params(spec);
  BackwardResult<S> out;
  if (want_param_grads) out.param_grads = ParamVector<S>::zeros(spec.param_layout());
  S* pg = want_param_grads ? out.param_grads.data().data() : nullptr;
  const S* pv = state.params.data().data();
  const auto& layout = state.params.layout();

  MatRM<S> d = dlogits;
  int bn_idx = static_cast<int>(rec.bn_used.size());
  for (int i = static_cast<int>(spec.layers.size()) - 1; i >= 0; --i) {
    const LayerSpec& l = spec.layers[static_cast<std::size_t>(i)];
    const Act<S>& in = rec.acts[static_cast<std::size_t>(i)];
    const bool need_dinput = i > 0 || want_input_grad;
    switch (l.kind) {
      case LayerKind::Linear: {
        const auto& we = layout[static_cast<std::size_t>(pidx[i].weight)];
        Eigen::Map<const MatRM<S>> weight(pv + we.offset, l.out, stages[static_cast<std::size_t>(i)].f);
        if (pg != nullptr) {
          Eigen::Map<MatRM<S>> dw(pg + we.offset, l.out, stages[static_cast<std::size_t>(i)].f);
          dw.noalias() += d.transpose() * in.m;
          if (pidx[i].bias >= 0) {
            const auto& be = layout[static_cast<std::size_t>(pidx[i].bias)];
            Eigen::Map<Vec<S>>(pg + be.offset, l.out) += d.colwise().sum().transpose();
          }
        }
        if (need_dinput) {
          MatRM<S> dn;
          dn.noalias() = d * weight;
          d = std::move(dn);
        }
        break;
      }
      case LayerKind::Conv2d: {
        const ConvGeom g = conv_geom(l, stages[static_cast<std::size_t>(i)], stages[static_cast<std::size_t>(i) + 1]);
        const auto& we = layout[static_cast<std::size_t>(pidx[i].weight)];
        Eigen::Map<const MatRM<S>> weight(pv + we.offset, g.out_c, g.patch_rows());
        MatRM<S> dw, dinput;
        Vec<S> db;
        conv_backward(g, weight, in, d, pg != nullptr ? &dw : nullptr,
                      (pg != nullptr && pidx[i].bias >= 0) ? &db : nullptr, need_dinput ? &dinput : nullptr);
        if (pg != nullptr) {
          Eigen::Map<MatRM<S>>(pg + we.offset, g.out_c, g.patch_rows()) += dw;
          if (pidx[i].bias >= 0) {
            const auto& be = layout[static_cast<std::size_t>(pidx[i].bias)];
            Eigen::Map<Vec<S>>(pg + be.offset, g.out_c) += db;
          }
        }
        if (need_dinput) d = std::move(dinput);
        break;
      }
      case LayerKind::BatchNorm: {
        --bn_idx;
        const auto& ge = layout[static_cast<std::size_t>(pidx[i].gamma)];
        Eigen::Map<const Vec<S>> gamma(pv + ge.offset, ge.count());
        Vec<S> dgamma, dbeta;
        detail::bn_backward_inplace(in, rec.bn_used[static_cast<std::size_t>(bn_idx)], gamma, d,
                                    pg != nullptr ? &dgamma : nullptr, pg != nullptr ? &dbeta : nullptr);
        if (pg != nullptr) {
          const auto& be = layout[static_cast<std::size_t>(pidx[i].beta)];
          Eigen::Map<Vec<S>>(pg + ge.offset, ge.count()) += dgamma;
          Eigen::Map<Vec<S>>(pg + be.offset, be.count()) += dbeta;
        }
        break;
      }
      case LayerKind::Relu: {
        d.array() *= (rec.acts[static_cast<std::size_t>(i) + 1].m.array() > S(0)).template cast<S>();
        break;
      }
      case LayerKind::Tanh: {
        d.array() *= (S(1) - rec.acts[static_cast<std::size_t>(i) + 1].m.array().square());
        break;
      }
      case LayerKind::Flatten: {
        const Eigen::Index hw = static_cast<Eigen::Index>(in.h) * in.w;
        MatRM<S> ds(in.c, static_cast<Eigen::Index>(in.n) * hw);
        parallel_chunks(static_cast<std::size_t>(in.n), [&](std::size_t, std::size_t begin, std::size_t end) {
          for (std::size_t j = begin; j < end; ++j) {
            for (int c = 0; c < in.c; ++c) {
              ds.block(c, static_cast<Eigen::Index>(j) * hw, 1, hw) =
                  d.block(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c) * hw, 1, hw);
            }
          }
        });
        d = std::move(ds);
        break;
      }
      case LayerKind::GlobalAvgPool: {
        const Eigen::Index hw = static_cast<Eigen::Index>(in.h) * in.w;
        const S inv = S(1) / static_cast<S>(hw);
        MatRM<S> ds(in.c, static_cast<Eigen::Index>(in.n) * hw);
        parallel_chunks(static_cast<std::size_t>(in.n), [&](std::size_t, std::size_t begin, std::size_t end) {
          for (std::size_t j = begin; j < end; ++j) {
            ds.middleCols(static_cast<Eigen::Index>(j) * hw, hw) =
                (d.row(static_cast<Eigen::Index>(j)).transpose() * inv).replicate(1, hw);
          }
        });
        d = std::move(ds);
        break;
      }
    }
  }
  if (want_input_grad) {
    Act<S> g;
    g.spatial = true;
    g.n = rec.n;
    g.c = spec.in_ch;
    g.h = spec.in_h;
    g.w = spec.in_w;
    g.m = std::move(d);
    out.input_grad = batch_from_act(g);
  }
  return out;
}

/// Per-sample reverse pass from logit `class_index`: writes the gradient of
/// f^i(x_j) w.r.t. all parameters into row j of `j_rows` [rec.n, P]. Requires
/// BN statistics that are constants (frozen or buffers), so rows stay
/// independent of each other.
template <typename S>
void backward_per_sample(const ModelState<S>& state, const ComputationRecord<S>& rec, int class_index,
                         MatRM<S>& j_full, Eigen::Index row_offset) {
  const ModelSpec& spec = state.spec;
  const auto stages = spec.infer_stages();
  const auto pidx = map_layer_params(spec);
  const S* pv = state.params.data().data();
  const auto& layout = state.params.layout();
  const int n = rec.n;
  auto row_ptr = [&](int j) { return j_full.data() + (row_offset + j) * j_full.cols(); };

  MatRM<S> d = MatRM<S>::Zero(n, spec.n_out);
  d.col(class_index).setOnes();

  int bn_idx = static_cast<int>(rec.bn_used.size());
  for (int i = static_cast<int>(spec.layers.size()) - 1; i >= 0; --i) {
    const LayerSpec& l = spec.layers[static_cast<std::size_t>(i)];
    const Act<S>& in = rec.acts[static_cast<std::size_t>(i)];
    const bool need_dinput = i > 0;
    switch (l.kind) {
      case LayerKind::Linear: {
        const auto& we = layout[static_cast<std::size_t>(pidx[i].weight)];
        const int in_f = stages[static_cast<std::size_t>(i)].f;
        Eigen::Map<const MatRM<S>> weight(pv + we.offset, l.out, in_f);
        for (int j = 0; j < n; ++j) {
          Eigen::Map<MatRM<S>> seg(row_ptr(j) + we.offset, l.out, in_f);
          seg.noalias() = d.row(j).transpose() * in.m.row(j);
          if (pidx[i].bias >= 0) {
            const auto& be = layout[static_cast<std::size_t>(pidx[i].bias)];
            Eigen::Map<Vec<S>>(row_ptr(j) + be.offset, l.out) = d.row(j).transpose();
          }
        }
        if (need_dinput) {
          MatRM<S> dn;
          dn.noalias() = d * weight;
          d = std::move(dn);
        }
        break;
      }
      case LayerKind::Conv2d: {
        const ConvGeom g = conv_geom(l, stages[static_cast<std::size_t>(i)], stages[static_cast<std::size_t>(i) + 1]);
        const auto& we = layout[static_cast<std::size_t>(pidx[i].weight)];
        Eigen::Map<const MatRM<S>> weight(pv + we.offset, g.out_c, g.patch_rows());
        const Eigen::Index ohw = g.out_hw();
        auto& scratch = ThreadScratch<S>::local();
        scratch.cols.resize(static_cast<std::size_t>(g.patch_rows() * ohw));
        for (int j = 0; j < n; ++j) {
          im2col_chunk(g, in.m, static_cast<std::size_t>(j), static_cast<std::size_t>(j) + 1, scratch.cols.data());
          Eigen::Map<const MatRM<S>> cols(scratch.cols.data(), g.patch_rows(), ohw);
          const auto gj = d.middleCols(static_cast<Eigen::Index>(j) * ohw, ohw);
          Eigen::Map<MatRM<S>> seg(row_ptr(j) + we.offset, g.out_c, g.patch_rows());
          seg.noalias() = gj * cols.transpose();
          if (pidx[i].bias >= 0) {
            const auto& be = layout[static_cast<std::size_t>(pidx[i].bias)];
            Eigen::Map<Vec<S>>(row_ptr(j) + be.offset, g.out_c) = gj.rowwise().sum();
          }
        }
        if (need_dinput) {
          MatRM<S> dinput;
          conv_backward<S>(g, weight, in, d, nullptr, nullptr, &dinput);
          d = std::move(dinput);
        }
        break;
      }
      case LayerKind::BatchNorm: {
        --bn_idx;
        const auto& applied = rec.bn_used[static_cast<std::size_t>(bn_idx)];
        if (applied.batch_stats)
          throw ValidationError("per-sample jacobian requires frozen BN statistics");
        const auto& ge = layout[static_cast<std::size_t>(pidx[i].gamma)];
        const auto& be = layout[static_cast<std::size_t>(pidx[i].beta)];
        Eigen::Map<const Vec<S>> gamma(pv + ge.offset, ge.count());
        if (in.spatial) {
          const Eigen::Index hw = static_cast<Eigen::Index>(in.h) * in.w;
          for (int j = 0; j < n; ++j) {
            const auto xj = in.m.middleCols(static_cast<Eigen::Index>(j) * hw, hw);
            const auto gj = d.middleCols(static_cast<Eigen::Index>(j) * hw, hw);
            MatRM<S> xhat = ((xj.colwise() - applied.mean).array().colwise() * applied.inv_std.array()).matrix();
            Eigen::Map<Vec<S>>(row_ptr(j) + ge.offset, ge.count()) =
                (gj.array() * xhat.array()).matrix().rowwise().sum();
            Eigen::Map<Vec<S>>(row_ptr(j) + be.offset, be.count()) = gj.rowwise().sum();
          }
          d = (d.array().colwise() * (gamma.cwiseProduct(applied.inv_std)).array()).matrix();
        } else {
          for (int j = 0; j < n; ++j) {
            const Vec<S> xhat =
                (in.m.row(j).transpose() - applied.mean).cwiseProduct(applied.inv_std);
            Eigen::Map<Vec<S>>(row_ptr(j) + ge.offset, ge.count()) =
                d.row(j).transpose().cwiseProduct(xhat);
            Eigen::Map<Vec<S>>(row_ptr(j) + be.offset, be.count()) = d.row(j).transpose();
          }
          d = (d.array().rowwise() * (gamma.cwiseProduct(applied.inv_std)).transpose().array()).matrix();
        }
        break;
      }
      case LayerKind::Relu: {
        d.array() *= (rec.acts[static_cast<std::size_t>(i) + 1].m.array() > S(0)).template cast<S>();
        break;
      }
      case LayerKind::Tanh: {
        d.array() *= (S(1) - rec.acts[static_cast<std::size_t>(i) + 1].m.array().square());
        break;
      }
      case LayerKind::Flatten: {
        const Eigen::Index hw = static_cast<Eigen::Index>(in.h) * in.w;
        MatRM<S> ds(in.c, static_cast<Eigen::Index>(in.n) * hw);
        for (int j = 0; j < n; ++j) {
          for (int c = 0; c < in.c; ++c) {
            ds.block(c, static_cast<Eigen::Index>(j) * hw, 1, hw) =
                d.block(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c) * hw, 1, hw);
          }
        }
        d = std::move(ds);
        break;
      }
      case LayerKind::GlobalAvgPool: {
        const Eigen::Index hw = static_cast<Eigen::Index>(in.h) * in.w;
        const S inv = S(1) / static_cast<S>(hw);
        MatRM<S> ds(in.c, static_cast<Eigen::Index>(in.n) * hw);
        for (int j = 0; j < n; ++j) {
          ds.middleCols(static_cast<Eigen::Index>(j) * hw, hw) =
              (d.row(static_cast<Eigen::Index>(j)).transpose() * inv).replicate(1, hw);
        }
        d = std::move(ds);
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Public gradient operations.
// ---------------------------------------------------------------------------

/// Pure forward to logits; never touches BN buffers.
template <typename S>
MatRM<S> forward_logits(const ModelState<S>& state, const Tensor<S>& x, Phase phase) {
  auto rec = run_forward(state, x, phase);
  if (!rec.logits().allFinite()) throw NumericFault(state.spec.name + ": non-finite logits");
  return rec.logits();
}

/// dLoss/dparams, averaged over the batch (the mean-loss convention).
template <typename S>
std::pair<S, ParamVector<S>> grad_params(const ModelState<S>& state, const Tensor<S>& x, const LossSpec<S>& loss,
                                         Phase phase) {
  auto rec = run_forward(state, x, phase);
  if (!rec.logits().allFinite()) throw NumericFault(state.spec.name + ": non-finite logits");
  auto lg = loss.evaluate(rec.logits());
  auto br = backward(state, rec, lg.dlogits, /*params=*/true, /*input=*/false);
  if (!br.param_grads.data().allFinite()) throw NumericFault(state.spec.name + ": non-finite parameter gradient");
  return {lg.loss, std::move(br.param_grads)};
}

/// dLoss/dinput with the same batch-mean convention; shape matches x.
template <typename S>
std::pair<S, Tensor<S>> grad_input(const ModelState<S>& state, const Tensor<S>& x, const LossSpec<S>& loss,
                                   Phase phase) {
  auto rec = run_forward(state, x, phase);
  if (!rec.logits().allFinite()) throw NumericFault(state.spec.name + ": non-finite logits");
  auto lg = loss.evaluate(rec.logits());
  auto br = backward(state, rec, lg.dlogits, /*params=*/false, /*input=*/true);
  if (!br.input_grad.all_finite()) throw NumericFault(state.spec.name + ": non-finite input gradient");
  return {lg.loss, std::move(br.input_grad)};
}

inline std::size_t jacobian_budget_bytes() {
  if (const char* env = std::getenv("NTKLAB_JACOBIAN_BUDGET_MB")) {
    const long v = std::atol(env);
    if (v > 0) return static_cast<std::size_t>(v) * (1u << 20);
  }
  return static_cast<std::size_t>(4096) * (1u << 20);
}

/// Row j = gradient of logit `class_index` on sample j w.r.t. all parameters.
/// BN runs on evaluation statistics frozen over the whole X (captured here
/// unless the caller supplies them), so the result is a function of
/// (params, X) only. Throws MemoryBudgetError when N*P exceeds the budget;
/// compute_entk falls back to streaming block products in that case.
template <typename S>
MatRM<S> per_sample_param_jacobian(const ModelState<S>& state, const Tensor<S>& X, int class_index,
                                   const FrozenBnStats<S>* frozen = nullptr,
                                   std::size_t budget_bytes = jacobian_budget_bytes()) {
  const int n = X.dim(0);
  const Eigen::Index p = state.params.size();
  if (class_index < 0 || class_index >= state.spec.n_out)
    throw ValidationError("jacobian: class index out of range");
  if (static_cast<std::size_t>(n) * static_cast<std::size_t>(p) * sizeof(S) > budget_bytes)
    throw MemoryBudgetError("jacobian: N*P exceeds the memory budget; use the streaming kernel path");

  FrozenBnStats<S> captured;
  if (frozen == nullptr && !state.bn.empty()) {
    captured = capture_eval_bn_stats(state, X);
    frozen = &captured;
  }

  MatRM<S> jac(n, p);
  const int c = X.dim(1), h = X.dim(2), w = X.dim(3);
  const Eigen::Index stride = static_cast<Eigen::Index>(c) * h * w;
  parallel_chunks(static_cast<std::size_t>(n), [&](std::size_t, std::size_t begin, std::size_t end) {
    Tensor<S> xc({static_cast<int>(end - begin), c, h, w});
    xc.data() = X.data().segment(static_cast<Eigen::Index>(begin) * stride,
                                 static_cast<Eigen::Index>(end - begin) * stride);
    auto rec = run_forward(state, xc, Phase::Eval, frozen);
    backward_per_sample(state, rec, class_index, jac, static_cast<Eigen::Index>(begin));
  });
  if (!jac.allFinite()) throw NumericFault("jacobian: non-finite entries");
  return jac;
}

}  // namespace ntklab
