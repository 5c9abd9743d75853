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

#include <Eigen/Dense>

#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ntklab {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
using MatRMd = MatRM<double>;
using MatRMf = MatRM<float>;
using Vecd = Vec<double>;
using Vecf = Vec<float>;

// Error taxonomy maps onto the CLI exit codes: ValidationError -> 1,
// NumericFault -> 2, everything else -> 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericFault : public std::runtime_error {
 public:
  explicit NumericFault(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class MemoryBudgetError : public std::runtime_error {
 public:
  explicit MemoryBudgetError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// All sampling in the project goes through this wrapper so that runs are
// reproducible bit-for-bit from a single seed. Named streams are derived with
// splitmix64 so that consuming one stream (say, attack noise) never shifts
// another (say, the shuffle order); SwitchAT depends on that separation.
// ---------------------------------------------------------------------------
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0x5bf0'3635'dcf9'83e3ULL)) {}

  static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
    return Rng(splitmix64(seed) ^ splitmix64(stream_id * 0x9e37'79b9'7f4a'7c15ULL + 0x1234'5678'9abc'def0ULL));
  }

  std::uint64_t next_u64() {
    // xorshift128+ style step on splitmix-derived state; plenty for sampling.
    state_ = splitmix64(state_);
    return state_;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // Box-Muller on two fresh uniforms.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  double truncated_normal(double mean, double stddev, double bound_in_std = 2.0) {
    double z = normal();
    while (std::abs(z) > bound_in_std) z = normal();
    return mean + stddev * z;
  }

  // Fisher-Yates over an index vector.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Deterministic data parallelism.
//
// Work is split into fixed-size chunks (independent of the worker count), so
// disjoint-write kernels produce identical bytes no matter how many workers
// run, and reductions combine per-chunk partials in chunk order. The worker
// count comes from NTKLAB_WORKERS (default: hardware concurrency).
// ---------------------------------------------------------------------------
inline int worker_count() {
  static const int n = [] {
    if (const char* env = std::getenv("NTKLAB_WORKERS")) {
      const int v = std::atoi(env);
      if (v >= 1) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return n;
}

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool(worker_count());
    return pool;
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  // Runs fn(task_index) for task_index in [0, n_tasks) and waits.
  // Calls from inside a pool task execute inline (no nested scheduling).
  void run(std::size_t n_tasks, const std::function<void(std::size_t)>& fn) {
    if (n_tasks == 0) return;
    if (threads_.empty() || n_tasks == 1 || tl_in_pool()) {
      for (std::size_t i = 0; i < n_tasks; ++i) fn(i);
      return;
    }
    std::unique_lock<std::mutex> lk(mu_);
    job_ = &fn;
    next_task_ = 0;
    tasks_total_ = n_tasks;
    tasks_done_ = 0;
    ++generation_;
    cv_.notify_all();
    // The caller participates too, so a pool of size W serves W+1 lanes.
    work(lk);
    done_cv_.wait(lk, [&] { return tasks_done_ == tasks_total_; });
    job_ = nullptr;
  }

 private:
  explicit ThreadPool(int workers) {
    const int n = workers - 1;  // caller thread is one of the lanes
    for (int i = 0; i < n; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  static bool& tl_in_pool() {
    static thread_local bool flag = false;
    return flag;
  }

  void worker_loop() {
    std::unique_lock<std::mutex> lk(mu_);
    std::uint64_t seen = 0;
    for (;;) {
      cv_.wait(lk, [&] { return stop_ || (job_ != nullptr && generation_ != seen && next_task_ < tasks_total_); });
      if (stop_) return;
      seen = generation_;
      work(lk);
    }
  }

  void work(std::unique_lock<std::mutex>& lk) {
    while (job_ != nullptr && next_task_ < tasks_total_) {
      const std::size_t idx = next_task_++;
      const auto* fn = job_;
      lk.unlock();
      tl_in_pool() = true;
      (*fn)(idx);
      tl_in_pool() = false;
      lk.lock();
      if (++tasks_done_ == tasks_total_) done_cv_.notify_all();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(std::size_t)>* job_ = nullptr;
  std::size_t next_task_ = 0;
  std::size_t tasks_total_ = 0;
  std::size_t tasks_done_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

// Fixed chunk width for batch-dimension parallelism.
inline constexpr std::size_t kChunk = 32;

inline std::size_t chunk_count(std::size_t n) { return (n + kChunk - 1) / kChunk; }

// fn(chunk_index, begin, end) over [0, n) in fixed chunks of kChunk.
inline void parallel_chunks(std::size_t n, const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  const std::size_t nc = chunk_count(n);
  ThreadPool::instance().run(nc, [&](std::size_t c) {
    const std::size_t begin = c * kChunk;
    const std::size_t end = std::min(n, begin + kChunk);
    fn(c, begin, end);
  });
}

}  // namespace ntklab
