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
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "ntklab/data.hpp"

using namespace ntklab;

namespace {

std::string temp_path(const std::string& stem) {
  return std::string("/tmp/ntklab_test_") + stem + "_" + std::to_string(::getpid()) + ".bin";
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_SUITE_BEGIN("data");

TEST_CASE("cifar binary records parse labels and scaled pixels") {
  std::vector<unsigned char> bytes(2 * 3073, 0);
  bytes[0] = 7;
  for (int i = 1; i < 3073; ++i) bytes[static_cast<std::size_t>(i)] = 255;
  bytes[3073] = 2;
  bytes[3074] = 51;  // first pixel of record 1 -> 0.2
  const auto path = temp_path("cifar");
  write_bytes(path, bytes);
  const auto ds = load_cifar_binary(path);
  CHECK(ds.size() == 2);
  CHECK(ds.labels[0] == 7);
  CHECK(ds.labels[1] == 2);
  CHECK(ds.images[0] == doctest::Approx(1.0f));
  CHECK(ds.images.data().segment(0, 3072).minCoeff() == doctest::Approx(1.0f));
  CHECK(ds.images[3072] == doctest::Approx(51.0f / 255.0f));
  std::remove(path.c_str());
}

TEST_CASE("cifar loader rejects truncated files and bad labels") {
  const auto path = temp_path("cifar_bad");
  write_bytes(path, std::vector<unsigned char>(100, 0));
  CHECK_THROWS_AS(load_cifar_binary(path), ValidationError);
  std::vector<unsigned char> bytes(3073, 0);
  bytes[0] = 12;
  write_bytes(path, bytes);
  CHECK_THROWS_AS(load_cifar_binary(path), ValidationError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_cifar_binary("/nonexistent/path.bin"), IoError);
}

TEST_CASE("cifar round trip is bitwise after quantization") {
  SynthSpec spec;
  spec.class_count = 3;
  spec.per_class = 4;
  spec.noise = 0.2;
  auto ds = synth_dataset(spec);
  // Quantize once; a save/load cycle must then reproduce it exactly.
  for (Eigen::Index i = 0; i < ds.images.size(); ++i) {
    ds.images[i] = static_cast<float>(std::lround(ds.images[i] * 255.0f)) / 255.0f;
  }
  const auto path = temp_path("cifar_rt");
  save_cifar_binary(ds, path);
  const auto loaded = load_cifar_binary(path);
  CHECK(loaded.size() == ds.size());
  CHECK((loaded.images.data() - ds.images.data()).cwiseAbs().maxCoeff() == 0.0f);
  for (int i = 0; i < ds.size(); ++i) CHECK(loaded.labels[static_cast<std::size_t>(i)] == ds.labels[static_cast<std::size_t>(i)]);
  std::remove(path.c_str());
}

TEST_CASE("synthetic dataset: balance, zero-noise identity, nearest-prototype separability") {
  SynthSpec spec;
  spec.class_count = 2;
  spec.per_class = 5;
  spec.noise = 0.0;
  const auto ds = synth_dataset(spec);
  CHECK(ds.size() == 10);
  int c0 = 0;
  for (int l : ds.labels) c0 += (l == 0);
  CHECK(c0 == 5);
  // Zero noise: all samples of a class identical.
  for (int j = 1; j < 5; ++j) {
    CHECK((ds.images.sample(j) - ds.images.sample(0)).cwiseAbs().maxCoeff() == 0.0f);
  }

  // Low noise: nearest class-prototype classification is perfect (the
  // closed-form separability the construction guarantees).
  SynthSpec noisy = spec;
  noisy.class_count = 4;
  noisy.per_class = 25;
  noisy.noise = 0.05;
  const auto nds = synth_dataset(noisy);
  const Eigen::Index pix = nds.images.sample(0).size();
  std::vector<Vecf> proto(4, Vecf::Zero(pix));
  std::vector<int> counts(4, 0);
  for (int i = 0; i < nds.size(); ++i) {
    proto[static_cast<std::size_t>(nds.labels[static_cast<std::size_t>(i)])] += nds.images.sample(i);
    counts[static_cast<std::size_t>(nds.labels[static_cast<std::size_t>(i)])]++;
  }
  for (int c = 0; c < 4; ++c) proto[static_cast<std::size_t>(c)] /= static_cast<float>(counts[static_cast<std::size_t>(c)]);
  int correct = 0;
  for (int i = 0; i < nds.size(); ++i) {
    int best = -1;
    float best_d = std::numeric_limits<float>::infinity();
    for (int c = 0; c < 4; ++c) {
      const float d = (nds.images.sample(i) - proto[static_cast<std::size_t>(c)]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += (best == nds.labels[static_cast<std::size_t>(i)]);
  }
  CHECK(correct == nds.size());
}

TEST_CASE("probe sampling is stratified, deterministic, and validated") {
  SynthSpec spec;
  spec.class_count = 10;
  spec.per_class = 80;
  spec.noise = 0.05;
  const auto ds = synth_dataset(spec);

  const auto probe = sample_probe(ds, 500, 42);
  CHECK(probe.indices.size() == 500);
  CHECK(probe.per_class == 50);
  std::vector<int> per_class(10, 0);
  std::set<int> unique;
  for (int idx : probe.indices) {
    per_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(idx)])]++;
    unique.insert(idx);
  }
  for (int c = 0; c < 10; ++c) CHECK(per_class[static_cast<std::size_t>(c)] == 50);
  CHECK(unique.size() == 500);  // without replacement

  const auto tiny = sample_probe(ds, 10, 1);
  CHECK(tiny.per_class == 1);

  const auto again = sample_probe(ds, 500, 42);
  CHECK(again.indices == probe.indices);
  CHECK(sample_probe(ds, 500, 43).indices != probe.indices);

  CHECK_THROWS_AS(sample_probe(ds, 501, 1), ValidationError);   // not divisible
  CHECK_THROWS_AS(sample_probe(ds, 1000, 1), ValidationError);  // not enough per class
}

TEST_CASE("augmentation modes") {
  SynthSpec spec;
  spec.class_count = 2;
  spec.per_class = 32;
  spec.noise = 0.1;
  const auto ds = synth_dataset(spec);
  std::vector<int> idx(64);
  for (int i = 0; i < 64; ++i) idx[static_cast<std::size_t>(i)] = i;
  const auto batch = ds.gather(idx);

  // Identity configuration.
  AugmentationConfig id_cfg{0, 0.0, AugMode::PerSample};
  Rng rng(3);
  const auto same = augment(batch, id_cfg, rng);
  CHECK((same.data() - batch.data()).cwiseAbs().maxCoeff() == 0.0f);

  // BatchShared with flip_prob 1: every image flipped, offsets equal.
  AugmentationConfig shared_cfg{4, 1.0, AugMode::BatchShared};
  for (int trial = 0; trial < 100; ++trial) {
    AugmentationTrace trace;
    const auto out = augment(batch, shared_cfg, rng, &trace);
    CHECK(out.data().minCoeff() >= 0.0f);
    CHECK(out.data().maxCoeff() <= 1.0f);
    for (std::size_t j = 1; j < trace.dy.size(); ++j) {
      REQUIRE(trace.dy[j] == trace.dy[0]);
      REQUIRE(trace.dx[j] == trace.dx[0]);
      REQUIRE(trace.flip[j] == trace.flip[0]);
    }
    for (const auto f : trace.flip) REQUIRE(f == 1);
  }

  // PerSample: with pad 4 there are 81 offsets; 64 samples collide entirely
  // with probability (1/81)^63, so demanding a differing pair is safe.
  AugmentationConfig per_cfg{4, 0.5, AugMode::PerSample};
  AugmentationTrace trace;
  augment(batch, per_cfg, rng, &trace);
  bool any_diff = false;
  for (std::size_t j = 1; j < trace.dy.size(); ++j) {
    if (trace.dy[j] != trace.dy[0] || trace.dx[j] != trace.dx[0]) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("label noise relabels the stated fraction to other classes") {
  SynthSpec spec;
  spec.class_count = 5;
  spec.per_class = 400;
  spec.noise = 0.05;
  spec.label_noise = 0.1;
  const auto ds = synth_dataset(spec);
  // Samples are drawn class-major; count labels diverging from the block class.
  int flipped = 0;
  for (int c = 0; c < 5; ++c) {
    for (int s_i = 0; s_i < 400; ++s_i) {
      const int got = ds.labels[static_cast<std::size_t>(c * 400 + s_i)];
      REQUIRE(got >= 0);
      REQUIRE(got < 5);
      flipped += (got != c);
    }
  }
  CHECK(flipped > 120);  // ~200 expected at 10%
  CHECK(flipped < 280);

  SynthSpec clean = spec;
  clean.label_noise = 0.0;
  const auto cds = synth_dataset(clean);
  for (int c = 0; c < 5; ++c) {
    for (int s_i = 0; s_i < 400; ++s_i) {
      REQUIRE(cds.labels[static_cast<std::size_t>(c * 400 + s_i)] == c);
    }
  }
}

TEST_CASE("anisotropic noise is bounded, clipped, and per-sample independent") {
  Tensor<float> batch({2, 1, 4, 4});
  batch.data().setConstant(0.5f);
  Rng rng(9);
  const auto same = add_anisotropic_noise(batch, 0.0, rng);
  CHECK((same.data() - batch.data()).cwiseAbs().maxCoeff() == 0.0f);

  const double eps = 8.0 / 255.0;
  const auto noisy = add_anisotropic_noise(batch, eps, rng);
  CHECK((noisy.data() - batch.data()).cwiseAbs().maxCoeff() <= static_cast<float>(eps) + 1e-7f);
  CHECK((noisy.sample(0) - noisy.sample(1)).cwiseAbs().maxCoeff() > 0.0f);

  Tensor<float> edge({1, 1, 2, 2});
  edge.data().setConstant(0.999f);
  const auto clipped = add_anisotropic_noise(edge, 0.5, rng);
  CHECK(clipped.data().maxCoeff() <= 1.0f);
  CHECK(clipped.data().minCoeff() >= 0.0f);

  CHECK_THROWS_AS(add_anisotropic_noise(batch, -0.1, rng), ValidationError);
}

TEST_SUITE_END();
