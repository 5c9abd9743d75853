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

// Case-study commands on a micro profile: the comparative machinery (grids,
// cost ratios, reports) in seconds rather than hours.

#include <doctest.h>

#include <filesystem>

#include "ntklab/commands.hpp"

using namespace ntklab;
namespace fs = std::filesystem;

namespace {

ExperimentConfig micro_config() {
  ExperimentConfig cfg;
  cfg.dataset.kind = "synth";
  cfg.dataset.class_count = 3;
  cfg.dataset.per_class_train = 40;
  cfg.dataset.per_class_test = 12;
  cfg.dataset.noise = 0.12;
  cfg.dataset.modes_per_class = 2;
  cfg.dataset.seed = 6;
  cfg.model.arch = "mlp_small";
  cfg.model.n_out = 3;
  cfg.model.seed = 2;
  cfg.train.epochs = 20;
  cfg.train.batch_size = 30;
  cfg.train.lr0 = 0.05;
  cfg.train.decay_epochs = {10, 15};
  cfg.train.seed = 4;
  cfg.train.probe_interval = 20;  // init + final snapshots only
  cfg.train.strategy.kind = StrategyKind::PgdAT;
  cfg.train.strategy.attack = AttackConfig{8.0 / 255, 2.0 / 255, 10, true};
  cfg.train.eval_attack = AttackConfig{8.0 / 255, 4.0 / 255, 2, true};
  cfg.probe.size = 12;
  cfg.probe.seed = 3;
  cfg.artifacts.checkpoints = SaveMode::None;
  cfg.artifacts.kernels = SaveMode::Last;
  return cfg;
}

std::string scratch() {
  const auto dir = fs::temp_directory_path() / ("ntklab_case_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir.string();
}

}  // namespace

TEST_SUITE_BEGIN("cases");

TEST_CASE("switch case study: grid rows, exact half-way cost ratio, kernel distances") {
  const auto dir = scratch();
  const auto report = cmd_case_switch(micro_config(), dir, /*verbose=*/false);
  REQUIRE(report.rows.size() == 5);  // baseline + {0.45, 0.5, 0.55, 0.7} * T
  CHECK(report.rows[0].name == "baseline");
  CHECK(report.rows[0].cost_ratio == 1.0);

  // T = 20: switch epochs 9, 10, 11, 14.
  const std::vector<int> expect_k = {9, 10, 11, 14};
  for (std::size_t i = 1; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    CHECK(r.switch_epoch == expect_k[i - 1]);
    // k clean epochs at 1x plus (T-k) at 11x over a T*11 baseline.
    const double expected = (r.switch_epoch * 1.0 + (20 - r.switch_epoch) * 11.0) / (20 * 11.0);
    CHECK(r.cost_ratio == doctest::Approx(expected).epsilon(1e-12));
    CHECK(r.kd_clean_final >= 0.0);
    CHECK(r.kd_adv_final >= 0.0);
    CHECK(std::isfinite(r.kd_clean_final));
  }
  const auto& half = report.rows[2];  // k = T/2
  CHECK(half.cost_ratio == doctest::Approx(6.0 / 11.0).epsilon(0.005));

  // Reference wall-clock ratios from the published per-epoch timings.
  CHECK(report.reference_ratio_k100 == doctest::Approx(11500.0 / 18000.0).epsilon(1e-15));
  CHECK(report.reference_ratio_k140 == doctest::Approx(8900.0 / 18000.0).epsilon(1e-15));

  CHECK(fs::exists(dir + "/report.csv"));
  CHECK(fs::exists(dir + "/report.json"));
  CHECK(fs::exists(dir + "/baseline/trace.csv"));
  CHECK(fs::exists(dir + "/switch_10/kernels/epoch_019_clean.entk"));
  fs::remove_all(dir);
}

TEST_CASE("overfit case study: four strategies, traces, detector wiring") {
  const auto dir = scratch();
  auto cfg = micro_config();
  cfg.train.epochs = 6;
  cfg.train.decay_epochs = {3};
  cfg.train.probe_interval = 0;
  cfg.probe.size = 0;
  cfg.artifacts.kernels = SaveMode::None;
  const auto report = cmd_case_overfit(cfg, dir, /*verbose=*/false);
  REQUIRE(report.rows.size() == 4);
  const std::vector<std::string> expect = {"fgsm_at", "noise_fgsm_at", "te", "te_of"};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(report.rows[i].strategy == expect[i]);
    CHECK(report.rows[i].peak_robust >= report.rows[i].final_robust - 1e-12);
    CHECK(fs::exists(dir + "/" + expect[i] + "/trace.csv"));
  }
  CHECK(fs::exists(dir + "/report.csv"));
  fs::remove_all(dir);
}

TEST_SUITE_END();
