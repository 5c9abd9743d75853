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

#include <json.hpp>

#include "ntklab/training.hpp"

namespace ntklab {

struct DatasetConfig {
  std::string kind = "synth";  // synth | cifar
  std::vector<std::string> paths;       // cifar train files
  std::vector<std::string> test_paths;  // cifar test files
  int train_count = 0;  // 0: all (cifar); balanced subset otherwise
  int test_count = 0;
  int class_count = 10;       // synth
  int per_class_train = 500;  // synth
  int per_class_test = 100;   // synth
  double noise = 0.25;        // synth
  int modes_per_class = 8;    // synth
  double label_noise = 0.0;   // synth, training split only
  std::uint64_t seed = 1;
};

struct ModelConfig {
  std::string arch = "desk_cnn";
  int n_out = 10;
  InitScheme init{InitKind::Uniform};
  BufferMode buffer_mode = BufferMode::WithBuffer;
  std::uint64_t seed = 1;
};

enum class SaveMode { All, Last, None };

struct ArtifactsConfig {
  SaveMode checkpoints = SaveMode::All;
  SaveMode kernels = SaveMode::All;
};

struct ProbeConfig {
  int size = 200;
  std::uint64_t seed = 7;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  ProbeConfig probe;
  ArtifactsConfig artifacts;

  /// Fully materialized config (defaults filled in) for the run-dir echo.
  nlohmann::json echo() const;
};

/// Parses and schema-validates; unknown keys are rejected with every
/// offending key named.
ExperimentConfig parse_config(const std::string& path);
ExperimentConfig config_from_json(const nlohmann::json& j);

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Materializes the datasets a config describes (synthetic generation or
/// CIFAR binary files, with balanced subsetting).
DataSplits load_datasets(const DatasetConfig& cfg);

}  // namespace ntklab
