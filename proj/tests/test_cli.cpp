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

// Integration coverage of the command-line surface: exit codes, run-directory
// layout, snapshot tooling. The binary path arrives via NTKLAB_CLI.

#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "ntklab/io.hpp"

using namespace ntklab;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* p = std::getenv("NTKLAB_CLI");
  REQUIRE_MESSAGE(p != nullptr, "NTKLAB_CLI must point at the ntklab binary");
  return p;
}

struct CmdResult {
  int exit_code;
  std::string output;
};

CmdResult run_cli(const std::string& args) {
  const std::string out_file = "/tmp/ntklab_cli_out_" + std::to_string(::getpid());
  const std::string cmd = "\"" + cli_path() + "\" " + args + " > " + out_file + " 2>&1";
  const int rc = std::system(cmd.c_str());
  std::ifstream f(out_file);
  std::string output((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::remove(out_file.c_str());
  return {WEXITSTATUS(rc), output};
}

std::string scratch_dir() {
  const auto dir = fs::temp_directory_path() / ("ntklab_cli_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir.string();
}

const char* kSmokeConfig = R"({
  "dataset": {"kind": "synth", "class_count": 4, "per_class_train": 24, "per_class_test": 8,
              "noise": 0.15, "modes_per_class": 2, "seed": 5},
  "model": {"arch": "mlp_small", "n_out": 4, "seed": 3},
  "train": {"epochs": 2, "batch_size": 32, "lr0": 0.05, "decay_epochs": [1], "seed": 11,
            "probe_interval": 1,
            "strategy": {"variant": "pgd_at",
                         "attack": {"epsilon": 0.0313725, "alpha": 0.0078431, "steps": 3,
                                    "random_start": true}}},
  "probe": {"size": 16, "seed": 9},
  "eval_attack": {"epsilon": 0.0313725, "alpha": 0.0078431, "steps": 3, "random_start": true}
})";

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("train produces a self-describing run directory; metrics consume it") {
  const auto dir = scratch_dir();
  const auto config = dir + "/cfg.json";
  {
    std::ofstream f(config);
    f << kSmokeConfig;
  }
  const auto run = run_cli("train --config " + config + " --out " + dir + "/run --quiet");
  CHECK(run.exit_code == 0);
  for (const char* rel : {"/run/trace.csv", "/run/config.json", "/run/seed.txt",
                          "/run/checkpoints/epoch_001.ckpt", "/run/kernels/epoch_000_clean.entk",
                          "/run/kernels/epoch_001_adv.entk", "/run/kernels/epoch_init_clean.entk"}) {
    CHECK_MESSAGE(fs::exists(dir + rel), rel);
  }
  const auto trace = read_trace_csv(dir + "/run/trace.csv");
  CHECK(trace.rows.size() == 2);

  // kd of a snapshot with itself is exactly zero.
  const auto kd = run_cli("metrics kd " + dir + "/run/kernels/epoch_001_clean.entk " + dir +
                          "/run/kernels/epoch_001_clean.entk");
  CHECK(kd.exit_code == 0);
  CHECK(std::abs(std::stod(kd.output)) < 1e-12);

  // ks with --labels al works on adversarial snapshots and fails loudly on
  // clean ones (no AL labels recorded).
  const auto ks_ok = run_cli("metrics ks " + dir + "/run/kernels/epoch_001_adv.entk --labels al");
  CHECK(ks_ok.exit_code == 0);
  const auto ks_bad = run_cli("metrics ks " + dir + "/run/kernels/epoch_001_clean.entk --labels al");
  CHECK(ks_bad.exit_code == 1);
  CHECK(ks_bad.output.find("adversarial labels") != std::string::npos);

  // Buffer-swap check consumes the trained checkpoint.
  const auto bnb = run_cli("check bn-buffer --config " + config + " --checkpoint " + dir +
                           "/run/checkpoints/epoch_001.ckpt --out " + dir + "/bn");
  CHECK(bnb.exit_code == 0);
  CHECK(bnb.output.find("robust") != std::string::npos);
  CHECK(fs::exists(dir + "/bn/bn_buffer.json"));
  fs::remove_all(dir);
}

TEST_CASE("ker of an identity test snapshot of size 50 prints 50") {
  const auto dir = scratch_dir();
  ClassKernel kernel;
  kernel.blocks = {MatRMd::Identity(50, 50), MatRMd::Identity(50, 50)};
  for (int i = 0; i < 50; ++i) {
    kernel.probe_ids.push_back(static_cast<std::uint32_t>(i));
    kernel.clean_labels.push_back(i % 2);
  }
  save_kernel_snapshot(kernel, dir + "/ident.entk");
  const auto ker = run_cli("metrics ker " + dir + "/ident.entk");
  CHECK(ker.exit_code == 0);
  CHECK(std::stod(ker.output) == doctest::Approx(50.0).epsilon(1e-10));
  fs::remove_all(dir);
}

TEST_CASE("kd refuses snapshots over different probes") {
  const auto dir = scratch_dir();
  ClassKernel a;
  a.blocks = {MatRMd::Identity(3, 3)};
  a.probe_ids = {1, 2, 3};
  a.clean_labels = {0, 0, 0};
  ClassKernel b = a;
  b.probe_ids = {4, 5, 6};
  save_kernel_snapshot(a, dir + "/a.entk");
  save_kernel_snapshot(b, dir + "/b.entk");
  const auto kd = run_cli("metrics kd " + dir + "/a.entk " + dir + "/b.entk");
  CHECK(kd.exit_code == 1);
  CHECK(kd.output.find("probe") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("config validation failures exit with code 1 and name the keys") {
  const auto dir = scratch_dir();
  const auto config = dir + "/bad.json";
  {
    std::ofstream f(config);
    f << R"({"train": {"strategy": {"attack": {"epislon": 0.1}}}})";
  }
  const auto run = run_cli("train --config " + config + " --out " + dir + "/run");
  CHECK(run.exit_code == 1);
  CHECK(run.output.find("epislon") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("check thm2 prints the violation count and writes reports") {
  const auto dir = scratch_dir();
  const auto run = run_cli("check thm2 --out " + dir + " --alpha 16 --k 4 --trials 50");
  CHECK(run.exit_code == 0);
  CHECK(run.output.find("violations: 0") != std::string::npos);
  CHECK(fs::exists(dir + "/thm2_identity_proof.csv"));
  CHECK(fs::exists(dir + "/thm2_identity_proof.json"));
  fs::remove_all(dir);
}

TEST_SUITE_END();
