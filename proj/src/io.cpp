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
#include "ntklab/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ntklab {

namespace {

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), f_(path, std::ios::binary | std::ios::trunc) {
    if (!f_) throw IoError("cannot open " + path + " for writing");
  }
  void bytes(const void* p, std::size_t n) { f_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void f64_array(const double* p, std::size_t n) { bytes(p, n * 8); }
  void str(const std::string& s) {
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void close() {
    f_.close();
    if (!f_) throw IoError("short write on " + path_);
  }

 private:
  std::string path_;
  std::ofstream f_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), f_(path, std::ios::binary) {
    if (!f_) throw IoError("cannot open " + path);
  }
  void bytes(void* p, std::size_t n) {
    f_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!f_) throw IoError(path_ + ": truncated file");
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint16_t u16() {
    std::uint16_t v;
    bytes(&v, 2);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  void f64_array(double* p, std::size_t n) { bytes(p, n * 8); }
  std::string str() {
    const auto n = u16();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream f_;
};

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kSnapshotVersion = 1;

}  // namespace

void save_checkpoint(const ModelState<float>& state, const std::string& path) {
  Writer w(path);
  w.bytes("NTKF", 4);
  w.u32(kCheckpointVersion);
  const auto& layout = state.params.layout();
  w.u32(static_cast<std::uint32_t>(layout.size()));
  for (const auto& e : layout) {
    w.str(e.name);
    w.u64(static_cast<std::uint64_t>(e.offset));
    w.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (int d : e.shape) w.u32(static_cast<std::uint32_t>(d));
  }
  w.u64(static_cast<std::uint64_t>(state.params.size()));
  Vecd data = state.params.data().cast<double>();
  w.f64_array(data.data(), static_cast<std::size_t>(data.size()));
  w.u32(static_cast<std::uint32_t>(state.bn.size()));
  for (const auto& b : state.bn) {
    w.u32(static_cast<std::uint32_t>(b.running_mean.size()));
    Vecd mean = b.running_mean.cast<double>();
    Vecd var = b.running_var.cast<double>();
    w.f64_array(mean.data(), static_cast<std::size_t>(mean.size()));
    w.f64_array(var.data(), static_cast<std::size_t>(var.size()));
  }
  w.close();
}

ModelState<float> load_checkpoint(const ModelSpec& spec, BufferMode mode, const std::string& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "NTKF", 4) != 0) throw ValidationError(path + ": not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw ValidationError(path + ": unsupported checkpoint version " + std::to_string(version));

  ModelState<float> state = build_model<float>(spec, InitScheme{}, 0, mode);
  const auto& layout = state.params.layout();
  const auto n_entries = r.u32();
  if (n_entries != layout.size())
    throw ValidationError(path + ": layout table size does not match the model spec");
  for (std::size_t i = 0; i < n_entries; ++i) {
    const std::string name = r.str();
    const auto offset = r.u64();
    const auto ndims = r.u8();
    std::vector<int> shape(ndims);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    if (name != layout[i].name || offset != static_cast<std::uint64_t>(layout[i].offset) ||
        shape != layout[i].shape)
      throw ValidationError(path + ": layout entry " + name + " does not match the model spec");
  }
  const auto p = r.u64();
  if (p != static_cast<std::uint64_t>(state.params.size()))
    throw ValidationError(path + ": parameter count mismatch");
  Vecd data(static_cast<Eigen::Index>(p));
  r.f64_array(data.data(), static_cast<std::size_t>(p));
  state.params.data() = data.cast<float>();

  const auto n_bn = r.u32();
  if (n_bn != state.bn.size()) throw ValidationError(path + ": BN layer count mismatch");
  for (auto& b : state.bn) {
    const auto channels = r.u32();
    if (channels != static_cast<std::uint32_t>(b.running_mean.size()))
      throw ValidationError(path + ": BN channel count mismatch");
    Vecd mean(channels), var(channels);
    r.f64_array(mean.data(), channels);
    r.f64_array(var.data(), channels);
    b.running_mean = mean.cast<float>();
    b.running_var = var.cast<float>();
  }
  return state;
}

void save_kernel_snapshot(const ClassKernel& kernel, const std::string& path) {
  const int n = kernel.n();
  Writer w(path);
  w.bytes("ENTK", 4);
  w.u32(kSnapshotVersion);
  w.u32(static_cast<std::uint32_t>(n));
  w.u32(static_cast<std::uint32_t>(kernel.n_out()));
  w.u8(kernel.has_adv_labels() ? 1 : 0);
  for (const auto& block : kernel.blocks) {
    w.f64_array(block.data(), static_cast<std::size_t>(block.size()));
  }
  for (auto id : kernel.probe_ids) w.u32(id);
  for (int l : kernel.clean_labels) w.u16(static_cast<std::uint16_t>(l));
  if (kernel.has_adv_labels()) {
    for (int l : kernel.adv_labels) w.u16(static_cast<std::uint16_t>(l));
  }
  w.close();
}

ClassKernel load_kernel_snapshot(const std::string& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "ENTK", 4) != 0) throw ValidationError(path + ": not a kernel snapshot (bad magic)");
  const auto version = r.u32();
  if (version != kSnapshotVersion)
    throw ValidationError(path + ": unsupported snapshot version " + std::to_string(version));
  const auto n = r.u32();
  const auto n_out = r.u32();
  const auto flags = r.u8();
  ClassKernel k;
  k.blocks.resize(n_out);
  for (auto& block : k.blocks) {
    block.resize(n, n);
    r.f64_array(block.data(), static_cast<std::size_t>(n) * n);
  }
  k.probe_ids.resize(n);
  for (auto& id : k.probe_ids) id = r.u32();
  k.clean_labels.resize(n);
  for (auto& l : k.clean_labels) l = r.u16();
  if (flags & 1) {
    k.adv_labels.resize(n);
    for (auto& l : k.adv_labels) l = r.u16();
  }
  return k;
}

const char kTraceHeader[] =
    "epoch,lr,train_clean_acc,test_clean_acc,test_robust_acc,train_loss,kd_clean,kd_adv,ker_clean,ker_adv,"
    "ks_cl_clean,ks_cl_adv,ks_al_adv,wall_seconds,grad_evals";

void write_trace_csv(const MetricTrace& trace, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << kTraceHeader << "\n";
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : trace.rows) {
    f << r.epoch << ',' << num(r.lr) << ',' << num(r.train_clean_acc) << ',' << num(r.test_clean_acc) << ','
      << num(r.test_robust_acc) << ',' << num(r.train_loss) << ',' << num(r.kd_clean) << ',' << num(r.kd_adv)
      << ',' << num(r.ker_clean) << ',' << num(r.ker_adv) << ',' << num(r.ks_cl_clean) << ','
      << num(r.ks_cl_adv) << ',' << num(r.ks_al_adv) << ',' << num(r.wall_seconds) << ',' << r.grad_evals
      << "\n";
  }
  f.close();
  if (!f) throw IoError("short write on " + path);
}

MetricTrace read_trace_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw ValidationError(path + ": empty trace");
  if (line != kTraceHeader) throw ValidationError(path + ": unexpected trace header");
  MetricTrace trace;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(is, field, ',')) fields.push_back(field);
    if (fields.size() != 15) throw ValidationError(path + ": malformed trace row");
    TraceRow r;
    r.epoch = std::stoi(fields[0]);
    r.lr = std::stod(fields[1]);
    r.train_clean_acc = std::stod(fields[2]);
    r.test_clean_acc = std::stod(fields[3]);
    r.test_robust_acc = std::stod(fields[4]);
    r.train_loss = std::stod(fields[5]);
    r.kd_clean = std::stod(fields[6]);
    r.kd_adv = std::stod(fields[7]);
    r.ker_clean = std::stod(fields[8]);
    r.ker_adv = std::stod(fields[9]);
    r.ks_cl_clean = std::stod(fields[10]);
    r.ks_cl_adv = std::stod(fields[11]);
    r.ks_al_adv = std::stod(fields[12]);
    r.wall_seconds = std::stod(fields[13]);
    r.grad_evals = std::stoll(fields[14]);
    trace.rows.push_back(r);
  }
  return trace;
}

}  // namespace ntklab
