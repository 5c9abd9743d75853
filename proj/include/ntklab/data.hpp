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

#include <string>
#include <vector>

#include "ntklab/tensor.hpp"

namespace ntklab {

/// Immutable labeled image set; values live in [0,1].
struct Dataset {
  Tensor<float> images;  // [M, C, H, W]
  std::vector<int> labels;
  int class_count = 0;

  int size() const { return images.shape().empty() ? 0 : images.dim(0); }

  Tensor<float> gather(const std::vector<int>& idx) const;
  std::vector<int> gather_labels(const std::vector<int>& idx) const;
  Dataset subset(const std::vector<int>& idx) const;
  /// First `count` samples taken class-balanced (round-robin over classes).
  Dataset balanced_head(int count) const;
};

enum class AugMode { PerSample, BatchShared };

struct AugmentationConfig {
  int crop_pad = 4;
  double flip_prob = 0.5;
  AugMode mode = AugMode::PerSample;
};

/// Per-image record of the augmentation draws, for instrumentation.
struct AugmentationTrace {
  std::vector<int> dy, dx;
  std::vector<std::uint8_t> flip;
};

/// Fixed, evenly stratified index list into a dataset.
struct ProbeSet {
  std::vector<int> indices;
  int per_class = 0;
};

/// Standard CIFAR-10 binary records: 1 label byte + 3072 plane bytes, /255.
Dataset load_cifar_binary(const std::string& path);
Dataset load_cifar_binary_files(const std::vector<std::string>& paths);
void save_cifar_binary(const Dataset& ds, const std::string& path);

struct SynthSpec {
  int class_count = 10;
  int per_class = 500;
  int channels = 3, height = 32, width = 32;
  double noise = 0.1;
  int modes_per_class = 1;   // >1 spreads each class over several prototypes
  double label_noise = 0.0;  // fraction of samples relabeled to a random other class
  std::uint64_t proto_seed = 1;
  std::uint64_t draw_seed = 2;
};

/// Class-conditional blob images: smooth per-class prototypes plus iid
/// Gaussian pixel noise, clipped to [0,1]. Train/test splits share
/// proto_seed and differ in draw_seed.
Dataset synth_dataset(const SynthSpec& spec);

/// n_total/class_count indices per class, uniform without replacement.
ProbeSet sample_probe(const Dataset& ds, int n_total, std::uint64_t seed);

/// Pad-and-crop plus horizontal flip. PerSample draws offsets and the flip
/// coin per image; BatchShared draws once and applies the same setting to
/// every image in the batch.
Tensor<float> augment(const Tensor<float>& batch, const AugmentationConfig& cfg, Rng& rng,
                      AugmentationTrace* trace = nullptr);

/// Independent uniform [-epsilon, epsilon] noise per pixel, then clip to [0,1].
Tensor<float> add_anisotropic_noise(const Tensor<float>& batch, double epsilon, Rng& rng);

}  // namespace ntklab
