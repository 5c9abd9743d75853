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

#include "ntklab/model.hpp"

namespace ntklab {

/// One activation stage of a batch.
/// Spatial stages are stored channel-major: rows = channels, columns indexed
/// by sample*H*W + y*W + x, so BN statistics are row reductions and the conv
/// GEMM consumes/produces contiguous column ranges per sample chunk.
/// Flat stages are [N, F] row-major.
template <typename S>
struct Act {
  MatRM<S> m;
  bool spatial = true;
  int n = 0, c = 0, h = 0, w = 0;  // spatial
  int f = 0;                       // flat

  static Act spatial_zero(int n, int c, int h, int w) {
    Act a;
    a.spatial = true;
    a.n = n;
    a.c = c;
    a.h = h;
    a.w = w;
    a.m.setZero(c, static_cast<Eigen::Index>(n) * h * w);
    return a;
  }
  static Act flat_zero(int n, int f) {
    Act a;
    a.spatial = false;
    a.n = n;
    a.f = f;
    a.m.setZero(n, f);
    return a;
  }
};

/// Batch tensor [N,C,H,W] -> channel-major activation.
template <typename S>
Act<S> act_from_batch(const Tensor<S>& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Act<S> a = Act<S>::spatial_zero(n, c, h, w);
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  for (int j = 0; j < n; ++j) {
    auto src = x.as_matrix(static_cast<Eigen::Index>(n) * c, hw);  // rows = (j, c)
    a.m.middleCols(j * hw, hw) = src.middleRows(static_cast<Eigen::Index>(j) * c, c);
  }
  return a;
}

/// Channel-major activation -> batch tensor [N,C,H,W].
template <typename S>
Tensor<S> batch_from_act(const Act<S>& a) {
  Tensor<S> x({a.n, a.c, a.h, a.w});
  const Eigen::Index hw = static_cast<Eigen::Index>(a.h) * a.w;
  auto dst = x.as_matrix(static_cast<Eigen::Index>(a.n) * a.c, hw);
  for (int j = 0; j < a.n; ++j) {
    dst.middleRows(static_cast<Eigen::Index>(j) * a.c, a.c) = a.m.middleCols(j * hw, hw);
  }
  return x;
}

template <typename S>
struct ThreadScratch {
  std::vector<S> cols;
  std::vector<S> dcols;

  static ThreadScratch& local() {
    static thread_local ThreadScratch s;
    return s;
  }
};

struct ConvGeom {
  int in_c, in_h, in_w;
  int out_c, out_h, out_w;
  int k, stride, pad;

  Eigen::Index patch_rows() const { return static_cast<Eigen::Index>(in_c) * k * k; }
  Eigen::Index out_hw() const { return static_cast<Eigen::Index>(out_h) * out_w; }
  Eigen::Index in_hw() const { return static_cast<Eigen::Index>(in_h) * in_w; }
};

inline ConvGeom conv_geom(const LayerSpec& l, const StageShape& in, const StageShape& out) {
  return ConvGeom{in.c, in.h, in.w, out.c, out.h, out.w, l.ksize, l.stride, l.pad};
}

/// im2col for samples [begin, end) of a channel-major input into a
/// [patch_rows, (end-begin)*out_hw] row-major buffer.
template <typename S>
void im2col_chunk(const ConvGeom& g, const MatRM<S>& input, std::size_t begin, std::size_t end, S* cols) {
  const Eigen::Index rows = g.patch_rows();
  const Eigen::Index ohw = g.out_hw();
  const Eigen::Index ihw = g.in_hw();
  const Eigen::Index ncols = static_cast<Eigen::Index>(end - begin) * ohw;
  Eigen::Map<MatRM<S>> c(cols, rows, ncols);
  for (int ci = 0; ci < g.in_c; ++ci) {
    const S* in_row = input.data() + static_cast<Eigen::Index>(ci) * input.cols();
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const Eigen::Index r = (static_cast<Eigen::Index>(ci) * g.k + ky) * g.k + kx;
        S* dst_row = cols + r * ncols;
        for (std::size_t jn = begin; jn < end; ++jn) {
          const S* src = in_row + static_cast<Eigen::Index>(jn) * ihw;
          S* dst = dst_row + static_cast<Eigen::Index>(jn - begin) * ohw;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.stride + ky - g.pad;
            S* drow = dst + static_cast<Eigen::Index>(oy) * g.out_w;
            if (iy < 0 || iy >= g.in_h) {
              std::fill(drow, drow + g.out_w, S(0));
              continue;
            }
            const S* srow = src + static_cast<Eigen::Index>(iy) * g.in_w;
            if (g.stride == 1) {
              // Only the borders can run out of range horizontally.
              for (int ox = 0; ox < g.out_w; ++ox) {
                const int ix = ox + kx - g.pad;
                drow[ox] = (ix >= 0 && ix < g.in_w) ? srow[ix] : S(0);
              }
            } else {
              for (int ox = 0; ox < g.out_w; ++ox) {
                const int ix = ox * g.stride + kx - g.pad;
                drow[ox] = (ix >= 0 && ix < g.in_w) ? srow[ix] : S(0);
              }
            }
          }
        }
      }
    }
  }
}

/// Scatter-add of a [patch_rows, (end-begin)*out_hw] cotangent buffer back to
/// the input gradient columns of samples [begin, end).
template <typename S>
void col2im_chunk(const ConvGeom& g, const S* dcols, std::size_t begin, std::size_t end, MatRM<S>& dinput) {
  const Eigen::Index ohw = g.out_hw();
  const Eigen::Index ihw = g.in_hw();
  const Eigen::Index ncols = static_cast<Eigen::Index>(end - begin) * ohw;
  for (int ci = 0; ci < g.in_c; ++ci) {
    S* out_row = dinput.data() + static_cast<Eigen::Index>(ci) * dinput.cols();
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const Eigen::Index r = (static_cast<Eigen::Index>(ci) * g.k + ky) * g.k + kx;
        const S* src_row = dcols + r * ncols;
        for (std::size_t jn = begin; jn < end; ++jn) {
          S* dst = out_row + static_cast<Eigen::Index>(jn) * ihw;
          const S* src = src_row + static_cast<Eigen::Index>(jn - begin) * ohw;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.in_h) continue;
            S* drow = dst + static_cast<Eigen::Index>(iy) * g.in_w;
            const S* srow = src + static_cast<Eigen::Index>(oy) * g.out_w;
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.stride + kx - g.pad;
              if (ix >= 0 && ix < g.in_w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

/// Conv forward: out = W * im2col(input) + bias, chunk-parallel over samples.
template <typename S>
void conv_forward(const ConvGeom& g, const Eigen::Map<const MatRM<S>>& weight, const S* bias, const Act<S>& in,
                  Act<S>& out) {
  const Eigen::Index ohw = g.out_hw();
  parallel_chunks(static_cast<std::size_t>(in.n), [&](std::size_t, std::size_t begin, std::size_t end) {
    auto& scratch = ThreadScratch<S>::local();
    const Eigen::Index ncols = static_cast<Eigen::Index>(end - begin) * ohw;
    scratch.cols.resize(static_cast<std::size_t>(g.patch_rows() * ncols));
    im2col_chunk(g, in.m, begin, end, scratch.cols.data());
    Eigen::Map<const MatRM<S>> cols(scratch.cols.data(), g.patch_rows(), ncols);
    auto dst = out.m.middleCols(static_cast<Eigen::Index>(begin) * ohw, ncols);
    dst.noalias() = weight * cols;
    if (bias != nullptr) {
      dst.colwise() += Eigen::Map<const Vec<S>>(bias, g.out_c);
    }
  });
}

/// Conv backward. Any of dweight/dbias/dinput may be skipped.
/// Weight/bias gradients are reduced over fixed sample chunks in chunk order,
/// so results do not depend on the worker count.
template <typename S>
void conv_backward(const ConvGeom& g, const Eigen::Map<const MatRM<S>>& weight, const Act<S>& in,
                   const MatRM<S>& dout, MatRM<S>* dweight, Vec<S>* dbias, MatRM<S>* dinput) {
  const Eigen::Index ohw = g.out_hw();
  const std::size_t nchunks = chunk_count(static_cast<std::size_t>(in.n));
  std::vector<MatRM<S>> w_partials(dweight != nullptr ? nchunks : 0);
  std::vector<Vec<S>> b_partials(dbias != nullptr ? nchunks : 0);
  if (dinput != nullptr) dinput->setZero(in.m.rows(), in.m.cols());

  parallel_chunks(static_cast<std::size_t>(in.n), [&](std::size_t ci, std::size_t begin, std::size_t end) {
    auto& scratch = ThreadScratch<S>::local();
    const Eigen::Index ncols = static_cast<Eigen::Index>(end - begin) * ohw;
    const auto g_chunk = dout.middleCols(static_cast<Eigen::Index>(begin) * ohw, ncols);
    if (dweight != nullptr || dbias != nullptr) {
      if (dweight != nullptr) {
        scratch.cols.resize(static_cast<std::size_t>(g.patch_rows() * ncols));
        im2col_chunk(g, in.m, begin, end, scratch.cols.data());
        Eigen::Map<const MatRM<S>> cols(scratch.cols.data(), g.patch_rows(), ncols);
        w_partials[ci].noalias() = g_chunk * cols.transpose();
      }
      if (dbias != nullptr) b_partials[ci] = g_chunk.rowwise().sum();
    }
    if (dinput != nullptr) {
      scratch.dcols.resize(static_cast<std::size_t>(g.patch_rows() * ncols));
      Eigen::Map<MatRM<S>> dcols(scratch.dcols.data(), g.patch_rows(), ncols);
      dcols.noalias() = weight.transpose() * g_chunk;
      col2im_chunk(g, scratch.dcols.data(), begin, end, *dinput);
    }
  });

  if (dweight != nullptr) {
    dweight->setZero(g.out_c, g.patch_rows());
    for (std::size_t ci = 0; ci < nchunks; ++ci) *dweight += w_partials[ci];
  }
  if (dbias != nullptr) {
    dbias->setZero(g.out_c);
    for (std::size_t ci = 0; ci < nchunks; ++ci) *dbias += b_partials[ci];
  }
}

/// Stats actually used by one BN application, kept for the backward pass.
template <typename S>
struct BnApplied {
  Vec<S> mean;
  Vec<S> inv_std;    // 1/sqrt(var + eps)
  bool batch_stats;  // true when the stats were computed from this batch
  Eigen::Index count;
};

/// Channel (spatial) or feature (flat) mean/variance of an activation.
/// Deterministic chunked reduction; biased (population) variance.
template <typename S>
void act_moments(const Act<S>& a, Vec<S>& mean, Vec<S>& var) {
  if (a.spatial) {
    const Eigen::Index hw = static_cast<Eigen::Index>(a.h) * a.w;
    const std::size_t nchunks = chunk_count(static_cast<std::size_t>(a.n));
    std::vector<Vec<S>> sum_p(nchunks), sq_p(nchunks);
    parallel_chunks(static_cast<std::size_t>(a.n), [&](std::size_t ci, std::size_t begin, std::size_t end) {
      const auto block = a.m.middleCols(static_cast<Eigen::Index>(begin) * hw,
                                        static_cast<Eigen::Index>(end - begin) * hw);
      sum_p[ci] = block.rowwise().sum();
      sq_p[ci] = block.array().square().matrix().rowwise().sum();
    });
    Vec<S> sum = Vec<S>::Zero(a.c), sq = Vec<S>::Zero(a.c);
    for (std::size_t ci = 0; ci < nchunks; ++ci) {
      sum += sum_p[ci];
      sq += sq_p[ci];
    }
    const S inv_n = S(1) / static_cast<S>(static_cast<Eigen::Index>(a.n) * hw);
    mean = sum * inv_n;
    var = sq * inv_n - mean.cwiseProduct(mean);
    var = var.cwiseMax(S(0));
  } else {
    mean = a.m.colwise().mean().transpose();
    Vec<S> sq = a.m.array().square().matrix().colwise().mean().transpose();
    var = (sq - mean.cwiseProduct(mean)).cwiseMax(S(0));
  }
}

template <typename S>
Eigen::Index bn_stat_count(const Act<S>& a) {
  return a.spatial ? static_cast<Eigen::Index>(a.n) * a.h * a.w : static_cast<Eigen::Index>(a.n);
}

/// Applies y = gamma * (x - mean) * inv_std + beta in place over an Act,
/// folded to y = x * scale + shift with per-channel constants.
template <typename S>
void bn_apply(Act<S>& a, const Vec<S>& mean, const Vec<S>& inv_std, const Eigen::Map<const Vec<S>>& gamma,
              const Eigen::Map<const Vec<S>>& beta) {
  const Vec<S> scale = gamma.cwiseProduct(inv_std);
  const Vec<S> shift = beta - mean.cwiseProduct(scale);
  if (a.spatial) {
    const Eigen::Index hw = static_cast<Eigen::Index>(a.h) * a.w;
    parallel_chunks(static_cast<std::size_t>(a.n), [&](std::size_t, std::size_t begin, std::size_t end) {
      auto block = a.m.middleCols(static_cast<Eigen::Index>(begin) * hw,
                                  static_cast<Eigen::Index>(end - begin) * hw);
      block = (block.array().colwise() * scale.array()).matrix();
      block.colwise() += shift;
    });
  } else {
    a.m = (a.m.array().rowwise() * scale.transpose().array()).matrix();
    a.m.rowwise() += shift.transpose();
  }
}

}  // namespace ntklab
