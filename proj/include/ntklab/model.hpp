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

#include <cmath>
#include <string>
#include <vector>

#include "ntklab/tensor.hpp"

namespace ntklab {

enum class LayerKind { Conv2d, Linear, BatchNorm, Relu, Tanh, Flatten, GlobalAvgPool };

struct LayerSpec {
  LayerKind kind;
  int out = 0;     // conv: out channels; linear: out features
  int ksize = 0;   // conv kernel size (square)
  int stride = 1;  // conv stride
  int pad = 0;     // conv zero padding
  bool bias = true;

  static LayerSpec conv2d(int out_ch, int k, int stride, int pad, bool bias = false) {
    return LayerSpec{LayerKind::Conv2d, out_ch, k, stride, pad, bias};
  }
  static LayerSpec linear(int out_features, bool bias = true) {
    return LayerSpec{LayerKind::Linear, out_features, 0, 1, 0, bias};
  }
  static LayerSpec batchnorm() { return LayerSpec{LayerKind::BatchNorm}; }
  static LayerSpec relu() { return LayerSpec{LayerKind::Relu}; }
  static LayerSpec tanh() { return LayerSpec{LayerKind::Tanh}; }
  static LayerSpec flatten() { return LayerSpec{LayerKind::Flatten}; }
  static LayerSpec global_avg_pool() { return LayerSpec{LayerKind::GlobalAvgPool}; }
};

/// Shape of one activation stage: spatial [C, H, W] per sample or flat [F].
struct StageShape {
  bool spatial = true;
  int c = 0, h = 0, w = 0;  // valid when spatial
  int f = 0;                // valid when flat

  int features() const { return spatial ? c * h * w : f; }
  /// BN statistics width: channels on spatial stages, features on flat ones.
  int bn_channels() const { return spatial ? c : f; }
};

struct ModelSpec {
  std::string name;
  int in_ch = 0, in_h = 0, in_w = 0;
  int n_out = 0;
  std::vector<LayerSpec> layers;

  /// Per-stage shapes: stage(i) is the input of layer i; stage(L) the output.
  /// Throws ValidationError when consecutive layers do not compose.
  std::vector<StageShape> infer_stages() const {
    std::vector<StageShape> stages;
    StageShape s;
    s.spatial = true;
    s.c = in_ch;
    s.h = in_h;
    s.w = in_w;
    stages.push_back(s);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      StageShape next = s;
      switch (l.kind) {
        case LayerKind::Conv2d: {
          if (!s.spatial) throw ValidationError(name + ": conv2d after flatten at layer " + std::to_string(i));
          next.h = (s.h + 2 * l.pad - l.ksize) / l.stride + 1;
          next.w = (s.w + 2 * l.pad - l.ksize) / l.stride + 1;
          next.c = l.out;
          if (next.h <= 0 || next.w <= 0) throw ValidationError(name + ": conv2d collapses spatial dims");
          break;
        }
        case LayerKind::Linear: {
          if (s.spatial) throw ValidationError(name + ": linear on spatial input at layer " + std::to_string(i));
          next.f = l.out;
          break;
        }
        case LayerKind::BatchNorm:
        case LayerKind::Relu:
        case LayerKind::Tanh:
          break;
        case LayerKind::Flatten: {
          next.spatial = false;
          next.f = s.features();
          break;
        }
        case LayerKind::GlobalAvgPool: {
          if (!s.spatial) throw ValidationError(name + ": global-avg-pool on flat input");
          next.spatial = false;
          next.f = s.c;
          break;
        }
      }
      stages.push_back(next);
      s = next;
    }
    if (layers.empty() || layers.back().kind != LayerKind::Linear)
      throw ValidationError(name + ": output layer must be linear");
    if (s.spatial || s.f != n_out)
      throw ValidationError(name + ": output width " + std::to_string(s.features()) + " != n_out " +
                            std::to_string(n_out));
    return stages;
  }

  /// Parameter layout in layer order: conv/linear weight [+ bias], BN gamma, beta.
  std::vector<ParamEntry> param_layout() const {
    const auto stages = infer_stages();
    std::vector<ParamEntry> layout;
    Eigen::Index off = 0;
    auto push = [&](const std::string& n, std::vector<int> shape) {
      ParamEntry e{n, off, std::move(shape)};
      off += e.count();
      layout.push_back(std::move(e));
    };
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      const StageShape& in = stages[i];
      const std::string tag = "L" + std::to_string(i);
      switch (l.kind) {
        case LayerKind::Conv2d:
          push(tag + ".conv.weight", {l.out, in.c, l.ksize, l.ksize});
          if (l.bias) push(tag + ".conv.bias", {l.out});
          break;
        case LayerKind::Linear:
          push(tag + ".linear.weight", {l.out, in.f});
          if (l.bias) push(tag + ".linear.bias", {l.out});
          break;
        case LayerKind::BatchNorm:
          push(tag + ".bn.gamma", {in.bn_channels()});
          push(tag + ".bn.beta", {in.bn_channels()});
          break;
        default:
          break;
      }
    }
    return layout;
  }

  Eigen::Index param_count() const {
    Eigen::Index n = 0;
    for (const auto& e : param_layout()) n += e.count();
    return n;
  }
};

enum class BufferMode { WithBuffer, WithoutBuffer };
enum class Phase { Train, Eval };

/// Running statistics of one batch-normalization layer. gamma/beta live in
/// the ParamVector; only the non-trainable buffers live here.
template <typename S>
struct BatchNormState {
  Vec<S> running_mean;
  Vec<S> running_var;
  S momentum = static_cast<S>(0.1);
  S eps = static_cast<S>(1e-5);

  static BatchNormState init(int channels) {
    BatchNormState st;
    st.running_mean = Vec<S>::Zero(channels);
    st.running_var = Vec<S>::Ones(channels);
    return st;
  }
};

enum class InitKind { Uniform, Normal, TruncatedNormal };

struct InitScheme {
  InitKind kind = InitKind::Uniform;
};

inline InitKind init_kind_from_string(const std::string& s) {
  if (s == "uniform") return InitKind::Uniform;
  if (s == "normal") return InitKind::Normal;
  if (s == "truncated_normal") return InitKind::TruncatedNormal;
  throw ValidationError("unknown init scheme: " + s);
}

/// Model parameters plus BN buffers and the active buffer mode. Single-writer
/// during training; treat as read-only when shared with evaluation workers.
template <typename S>
struct ModelState {
  ModelSpec spec;
  ParamVector<S> params;
  std::vector<BatchNormState<S>> bn;  // one per BatchNorm layer, in layer order
  BufferMode buffer_mode = BufferMode::WithBuffer;

  template <typename T>
  ModelState<T> cast() const {
    ModelState<T> out;
    out.spec = spec;
    out.params = params.template cast<T>();
    out.bn.reserve(bn.size());
    for (const auto& b : bn) {
      BatchNormState<T> nb;
      nb.running_mean = b.running_mean.template cast<T>();
      nb.running_var = b.running_var.template cast<T>();
      nb.momentum = static_cast<T>(b.momentum);
      nb.eps = static_cast<T>(b.eps);
      out.bn.push_back(std::move(nb));
    }
    out.buffer_mode = buffer_mode;
    return out;
  }
};

/// Toggles every BN layer's statistics source atomically; buffer contents are
/// preserved, so toggling twice restores the original behavior bitwise.
template <typename S>
void set_buffer_mode(ModelState<S>& state, BufferMode mode) {
  state.buffer_mode = mode;
}

/// Draws parameters per the init scheme: weights by the per-layer fan-in rule
/// (uniform bound 1/sqrt(fan_in), normal std sqrt(2/fan_in), truncated normal
/// cut at +-2 std), biases zero, BN gamma=1 / beta=0.
template <typename S>
ParamVector<S> build_params(const ModelSpec& spec, InitScheme init, std::uint64_t seed) {
  auto layout = spec.param_layout();
  auto params = ParamVector<S>::zeros(layout);
  Rng rng = Rng::stream(seed, /*stream_id=*/0xF17);
  const auto stages = spec.infer_stages();
  std::size_t entry = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const StageShape& in = stages[i];
    switch (l.kind) {
      case LayerKind::Conv2d:
      case LayerKind::Linear: {
        const double fan_in = l.kind == LayerKind::Conv2d ? static_cast<double>(in.c) * l.ksize * l.ksize
                                                          : static_cast<double>(in.f);
        auto w = params.block(entry++);
        switch (init.kind) {
          case InitKind::Uniform: {
            const double bound = 1.0 / std::sqrt(fan_in);
            for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = static_cast<S>(rng.uniform(-bound, bound));
            break;
          }
          case InitKind::Normal: {
            const double stddev = std::sqrt(2.0 / fan_in);
            for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = static_cast<S>(rng.normal(0.0, stddev));
            break;
          }
          case InitKind::TruncatedNormal: {
            const double stddev = std::sqrt(2.0 / fan_in);
            for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = static_cast<S>(rng.truncated_normal(0.0, stddev));
            break;
          }
        }
        if (l.bias) params.block(entry++).setZero();
        break;
      }
      case LayerKind::BatchNorm: {
        params.block(entry++).setConstant(static_cast<S>(1));  // gamma
        params.block(entry++).setZero();                       // beta
        break;
      }
      default:
        break;
    }
  }
  return params;
}

template <typename S>
ModelState<S> build_model(const ModelSpec& spec, InitScheme init, std::uint64_t seed,
                          BufferMode mode = BufferMode::WithBuffer) {
  ModelState<S> st;
  st.spec = spec;
  st.params = build_params<S>(spec, init, seed);
  const auto stages = spec.infer_stages();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::BatchNorm) {
      st.bn.push_back(BatchNormState<S>::init(stages[i].bn_channels()));
    }
  }
  st.buffer_mode = mode;
  return st;
}

// ---------------------------------------------------------------------------
// Architecture registry. The desk CNN stands in for the paper-scale network:
// four conv-BN-relu blocks with both stride-2 stages up front (keeps the
// conv arithmetic in large GEMMs), global average pooling, linear head.
// ---------------------------------------------------------------------------
inline ModelSpec desk_cnn_spec(int n_out = 10, bool tanh_activation = false) {
  auto act = [&] { return tanh_activation ? LayerSpec::tanh() : LayerSpec::relu(); };
  ModelSpec spec;
  spec.name = tanh_activation ? "desk_cnn_tanh" : "desk_cnn";
  spec.in_ch = 3;
  spec.in_h = 32;
  spec.in_w = 32;
  spec.n_out = n_out;
  spec.layers = {
      LayerSpec::conv2d(24, 3, 2, 1), LayerSpec::batchnorm(), act(),
      LayerSpec::conv2d(48, 3, 2, 1), LayerSpec::batchnorm(), act(),
      LayerSpec::conv2d(80, 3, 1, 1), LayerSpec::batchnorm(), act(),
      LayerSpec::conv2d(96, 3, 1, 1), LayerSpec::batchnorm(), act(),
      LayerSpec::global_avg_pool(),
      LayerSpec::linear(n_out),
  };
  return spec;
}

inline ModelSpec mlp_small_spec(int in_ch = 3, int in_h = 32, int in_w = 32, int n_out = 10) {
  ModelSpec spec;
  spec.name = "mlp_small";
  spec.in_ch = in_ch;
  spec.in_h = in_h;
  spec.in_w = in_w;
  spec.n_out = n_out;
  spec.layers = {
      LayerSpec::flatten(),
      LayerSpec::linear(64),
      LayerSpec::relu(),
      LayerSpec::linear(n_out),
  };
  return spec;
}

inline ModelSpec registry_model(const std::string& arch, int n_out) {
  if (arch == "desk_cnn") return desk_cnn_spec(n_out, false);
  if (arch == "desk_cnn_tanh") return desk_cnn_spec(n_out, true);
  if (arch == "mlp_small") return mlp_small_spec(3, 32, 32, n_out);
  throw ValidationError("unknown architecture: " + arch);
}

inline std::vector<std::string> registry_names() { return {"desk_cnn", "desk_cnn_tanh", "mlp_small"}; }

}  // namespace ntklab
