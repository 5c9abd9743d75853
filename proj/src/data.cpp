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
#include "ntklab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace ntklab {

namespace {
constexpr int kCifarDim = 32;
constexpr int kCifarChannels = 3;
constexpr std::size_t kCifarRecordBytes = 1 + kCifarChannels * kCifarDim * kCifarDim;
}  // namespace

Tensor<float> Dataset::gather(const std::vector<int>& idx) const {
  const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor<float> out({static_cast<int>(idx.size()), c, h, w});
  const Eigen::Index stride = static_cast<Eigen::Index>(c) * h * w;
  for (std::size_t j = 0; j < idx.size(); ++j) {
    out.data().segment(static_cast<Eigen::Index>(j) * stride, stride) =
        images.data().segment(static_cast<Eigen::Index>(idx[j]) * stride, stride);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(const std::vector<int>& idx) const {
  std::vector<int> out(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) out[j] = labels[static_cast<std::size_t>(idx[j])];
  return out;
}

Dataset Dataset::subset(const std::vector<int>& idx) const {
  Dataset out;
  out.images = gather(idx);
  out.labels = gather_labels(idx);
  out.class_count = class_count;
  return out;
}

Dataset Dataset::balanced_head(int count) const {
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(class_count));
  for (int i = 0; i < size(); ++i) by_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(i);
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(count));
  for (int round = 0; static_cast<int>(idx.size()) < count; ++round) {
    bool any = false;
    for (int c = 0; c < class_count && static_cast<int>(idx.size()) < count; ++c) {
      const auto& v = by_class[static_cast<std::size_t>(c)];
      if (round < static_cast<int>(v.size())) {
        idx.push_back(v[static_cast<std::size_t>(round)]);
        any = true;
      }
    }
    if (!any) throw ValidationError("dataset: not enough samples for balanced head of " + std::to_string(count));
  }
  return subset(idx);
}

Dataset load_cifar_binary(const std::string& path) { return load_cifar_binary_files({path}); }

Dataset load_cifar_binary_files(const std::vector<std::string>& paths) {
  std::vector<unsigned char> bytes;
  for (const auto& path : paths) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cifar: cannot open " + path);
    const std::streamsize len = f.tellg();
    if (len <= 0 || static_cast<std::size_t>(len) % kCifarRecordBytes != 0)
      throw ValidationError("cifar: " + path + " is truncated (length " + std::to_string(len) +
                            " is not a multiple of " + std::to_string(kCifarRecordBytes) + ")");
    const std::size_t off = bytes.size();
    bytes.resize(off + static_cast<std::size_t>(len));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(bytes.data() + off), len);
    if (!f) throw IoError("cifar: short read on " + path);
  }
  const std::size_t records = bytes.size() / kCifarRecordBytes;
  Dataset ds;
  ds.class_count = 10;
  ds.images = Tensor<float>({static_cast<int>(records), kCifarChannels, kCifarDim, kCifarDim});
  ds.labels.resize(records);
  const std::size_t plane = static_cast<std::size_t>(kCifarDim) * kCifarDim;
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    const int label = rec[0];
    if (label > 9) throw ValidationError("cifar: record " + std::to_string(r) + " has label byte " +
                                         std::to_string(label) + " > 9");
    ds.labels[r] = label;
    float* dst = ds.images.raw() + r * kCifarChannels * plane;
    for (std::size_t i = 0; i < kCifarChannels * plane; ++i) {
      dst[i] = static_cast<float>(rec[1 + i]) / 255.0f;
    }
  }
  return ds;
}

void save_cifar_binary(const Dataset& ds, const std::string& path) {
  if (ds.images.dim(1) != kCifarChannels || ds.images.dim(2) != kCifarDim || ds.images.dim(3) != kCifarDim)
    throw ValidationError("cifar: only 3x32x32 datasets serialize to the CIFAR record format");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cifar: cannot open " + path + " for writing");
  const std::size_t plane = static_cast<std::size_t>(kCifarDim) * kCifarDim;
  std::vector<unsigned char> rec(kCifarRecordBytes);
  for (int r = 0; r < ds.size(); ++r) {
    rec[0] = static_cast<unsigned char>(ds.labels[static_cast<std::size_t>(r)]);
    const float* src = ds.images.raw() + static_cast<std::size_t>(r) * kCifarChannels * plane;
    for (std::size_t i = 0; i < kCifarChannels * plane; ++i) {
      const float v = std::min(1.0f, std::max(0.0f, src[i]));
      rec[1 + i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    f.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
  if (!f) throw IoError("cifar: short write on " + path);
}

namespace {

// Smooth prototype built from a few Gaussian bumps plus a low-frequency
// sinusoid, drawn per (class, mode). Kept inside [0.15, 0.85] so sampling
// noise rarely clips.
void render_prototype(Rng& rng, int channels, int h, int w, float* out) {
  const int bumps = 3;
  std::vector<double> cy(bumps), cx(bumps), sigma(bumps);
  for (int b = 0; b < bumps; ++b) {
    cy[b] = rng.uniform(0.15, 0.85) * h;
    cx[b] = rng.uniform(0.15, 0.85) * w;
    sigma[b] = rng.uniform(0.12, 0.3) * std::min(h, w);
  }
  const double fy = rng.uniform(0.5, 2.5), fx = rng.uniform(0.5, 2.5);
  const double phase = rng.uniform(0.0, 6.283185307179586);
  for (int c = 0; c < channels; ++c) {
    std::vector<double> amp(bumps);
    for (int b = 0; b < bumps; ++b) amp[b] = rng.uniform(-0.35, 0.35);
    const double tex = rng.uniform(-0.12, 0.12);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = 0.5;
        for (int b = 0; b < bumps; ++b) {
          const double dy = y - cy[b], dx = x - cx[b];
          v += amp[b] * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma[b] * sigma[b]));
        }
        v += tex * std::sin(6.283185307179586 * (fy * y / h + fx * x / w) + phase);
        v = std::min(0.85, std::max(0.15, v));
        out[(static_cast<std::size_t>(c) * h + y) * w + x] = static_cast<float>(v);
      }
    }
  }
}

}  // namespace

Dataset synth_dataset(const SynthSpec& spec) {
  if (spec.class_count < 1 || spec.per_class < 1 || spec.modes_per_class < 1)
    throw ValidationError("synth: class_count, per_class and modes_per_class must be positive");
  if (spec.label_noise < 0.0 || spec.label_noise >= 1.0)
    throw ValidationError("synth: label_noise must lie in [0, 1)");
  const std::size_t pix = static_cast<std::size_t>(spec.channels) * spec.height * spec.width;
  std::vector<std::vector<float>> protos(static_cast<std::size_t>(spec.class_count) * spec.modes_per_class,
                                         std::vector<float>(pix));
  for (int c = 0; c < spec.class_count; ++c) {
    for (int u = 0; u < spec.modes_per_class; ++u) {
      Rng rng = Rng::stream(spec.proto_seed, static_cast<std::uint64_t>(c) * 977 + static_cast<std::uint64_t>(u));
      render_prototype(rng, spec.channels, spec.height, spec.width,
                       protos[static_cast<std::size_t>(c) * spec.modes_per_class + u].data());
    }
  }

  const int m = spec.class_count * spec.per_class;
  Dataset ds;
  ds.class_count = spec.class_count;
  ds.images = Tensor<float>({m, spec.channels, spec.height, spec.width});
  ds.labels.resize(static_cast<std::size_t>(m));
  Rng rng = Rng::stream(spec.draw_seed, 0xDA7A);
  int r = 0;
  for (int c = 0; c < spec.class_count; ++c) {
    for (int s = 0; s < spec.per_class; ++s, ++r) {
      const int u = spec.modes_per_class == 1 ? 0 : static_cast<int>(rng.uniform_int(0, spec.modes_per_class - 1));
      const float* proto = protos[static_cast<std::size_t>(c) * spec.modes_per_class + u].data();
      float* dst = ds.images.raw() + static_cast<std::size_t>(r) * pix;
      int label = c;
      if (spec.label_noise > 0.0 && rng.bernoulli(spec.label_noise)) {
        label = static_cast<int>(rng.uniform_int(0, spec.class_count - 2));
        if (label >= c) ++label;  // uniform over the other classes
      }
      ds.labels[static_cast<std::size_t>(r)] = label;
      if (spec.noise == 0.0) {
        std::copy(proto, proto + pix, dst);
      } else {
        for (std::size_t i = 0; i < pix; ++i) {
          const double v = proto[i] + spec.noise * rng.normal();
          dst[i] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
        }
      }
    }
  }
  return ds;
}

ProbeSet sample_probe(const Dataset& ds, int n_total, std::uint64_t seed) {
  if (ds.class_count < 1 || ds.size() < 1) throw ValidationError("probe: empty dataset");
  if (n_total % ds.class_count != 0)
    throw ValidationError("probe: " + std::to_string(n_total) + " is not divisible by " +
                          std::to_string(ds.class_count) + " classes");
  const int per_class = n_total / ds.class_count;
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.class_count));
  for (int i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);
  Rng rng = Rng::stream(seed, 0x9B0B);
  ProbeSet probe;
  probe.per_class = per_class;
  for (int c = 0; c < ds.class_count; ++c) {
    auto& v = by_class[static_cast<std::size_t>(c)];
    if (static_cast<int>(v.size()) < per_class)
      throw ValidationError("probe: class " + std::to_string(c) + " has only " + std::to_string(v.size()) +
                            " samples, need " + std::to_string(per_class));
    rng.shuffle(v);
    probe.indices.insert(probe.indices.end(), v.begin(), v.begin() + per_class);
  }
  return probe;
}

namespace {

void crop_flip_one(const float* src, float* dst, int c, int h, int w, int pad, int dy, int dx, bool flip) {
  // Reads from the zero-padded image at offset (dy, dx); flip mirrors x.
  for (int ch = 0; ch < c; ++ch) {
    const float* sp = src + static_cast<std::size_t>(ch) * h * w;
    float* dp = dst + static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      const int sy = y + dy - pad;
      for (int x = 0; x < w; ++x) {
        const int xl = flip ? (w - 1 - x) : x;
        const int sx = xl + dx - pad;
        dp[static_cast<std::size_t>(y) * w + x] =
            (sy >= 0 && sy < h && sx >= 0 && sx < w) ? sp[static_cast<std::size_t>(sy) * w + sx] : 0.0f;
      }
    }
  }
}

}  // namespace

Tensor<float> augment(const Tensor<float>& batch, const AugmentationConfig& cfg, Rng& rng,
                      AugmentationTrace* trace) {
  const int n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor<float> out(batch.shape());
  const std::size_t stride = static_cast<std::size_t>(c) * h * w;
  const int span = 2 * cfg.crop_pad;

  int shared_dy = 0, shared_dx = 0;
  bool shared_flip = false;
  if (cfg.mode == AugMode::BatchShared) {
    shared_dy = static_cast<int>(rng.uniform_int(0, span));
    shared_dx = static_cast<int>(rng.uniform_int(0, span));
    shared_flip = rng.bernoulli(cfg.flip_prob);
  }
  for (int j = 0; j < n; ++j) {
    int dy = shared_dy, dx = shared_dx;
    bool flip = shared_flip;
    if (cfg.mode == AugMode::PerSample) {
      dy = static_cast<int>(rng.uniform_int(0, span));
      dx = static_cast<int>(rng.uniform_int(0, span));
      flip = rng.bernoulli(cfg.flip_prob);
    }
    if (trace != nullptr) {
      trace->dy.push_back(dy);
      trace->dx.push_back(dx);
      trace->flip.push_back(flip ? 1 : 0);
    }
    crop_flip_one(batch.raw() + j * stride, out.raw() + j * stride, c, h, w, cfg.crop_pad, dy, dx, flip);
  }
  return out;
}

Tensor<float> add_anisotropic_noise(const Tensor<float>& batch, double epsilon, Rng& rng) {
  if (epsilon < 0.0) throw ValidationError("noise: epsilon must be >= 0");
  Tensor<float> out = batch;
  if (epsilon == 0.0) return out;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double v = out[i] + rng.uniform(-epsilon, epsilon);
    out[i] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
  }
  return out;
}

}  // namespace ntklab
