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

#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ntklab/common.hpp"

namespace ntklab {

/// Dense row-major tensor over a flat Eigen buffer. Image batches use the
/// shape [N, C, H, W]; flat feature batches use [N, F].
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.setZero(element_count(shape_));
  }

  Tensor(std::vector<int> shape, Vec<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw ValidationError("tensor: data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_string());
    }
  }

  static Eigen::Index element_count(const std::vector<int>& shape) {
    Eigen::Index n = 1;
    for (int d : shape) {
      if (d <= 0) throw ValidationError("tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  Eigen::Index size() const { return data_.size(); }

  Vec<S>& data() { return data_; }
  const Vec<S>& data() const { return data_; }
  S* raw() { return data_.data(); }
  const S* raw() const { return data_.data(); }

  S& operator[](Eigen::Index i) { return data_[i]; }
  S operator[](Eigen::Index i) const { return data_[i]; }

  bool all_finite() const { return data_.allFinite(); }

  /// Row-major [rows, cols] view over the flat buffer.
  Eigen::Map<MatRM<S>> as_matrix(Eigen::Index rows, Eigen::Index cols) {
    if (rows * cols != data_.size()) throw ValidationError("tensor: bad matrix view " + shape_string());
    return Eigen::Map<MatRM<S>>(data_.data(), rows, cols);
  }
  Eigen::Map<const MatRM<S>> as_matrix(Eigen::Index rows, Eigen::Index cols) const {
    if (rows * cols != data_.size()) throw ValidationError("tensor: bad matrix view " + shape_string());
    return Eigen::Map<const MatRM<S>>(data_.data(), rows, cols);
  }

  /// Contiguous per-sample slice of a batch tensor (leading dim = N).
  Eigen::Map<Vec<S>> sample(Eigen::Index j) {
    const Eigen::Index stride = data_.size() / shape_.at(0);
    return Eigen::Map<Vec<S>>(data_.data() + j * stride, stride);
  }
  Eigen::Map<const Vec<S>> sample(Eigen::Index j) const {
    const Eigen::Index stride = data_.size() / shape_.at(0);
    return Eigen::Map<const Vec<S>>(data_.data() + j * stride, stride);
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    out.data() = data_.template cast<T>();
    return out;
  }

 private:
  std::vector<int> shape_;
  Vec<S> data_;
};

/// One named parameter block inside a flattened parameter vector.
struct ParamEntry {
  std::string name;
  Eigen::Index offset = 0;
  std::vector<int> shape;

  Eigen::Index count() const {
    Eigen::Index n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

/// Flattened model parameters with the (name, offset, shape) layout table.
/// Slicing by layout entries is the unflatten direction; the flat vector is
/// the flatten direction, so the round trip is the identity by construction.
template <typename S>
class ParamVector {
 public:
  ParamVector() = default;

  ParamVector(std::vector<ParamEntry> layout, Vec<S> data)
      : layout_(std::move(layout)), data_(std::move(data)) {
    validate();
  }

  static ParamVector zeros(std::vector<ParamEntry> layout) {
    Eigen::Index total = 0;
    for (const auto& e : layout) total += e.count();
    Vec<S> data = Vec<S>::Zero(total);
    return ParamVector(std::move(layout), std::move(data));
  }

  const std::vector<ParamEntry>& layout() const { return layout_; }
  Eigen::Index size() const { return data_.size(); }

  Vec<S>& data() { return data_; }
  const Vec<S>& data() const { return data_; }

  Eigen::Map<Vec<S>> block(std::size_t entry_idx) {
    const auto& e = layout_.at(entry_idx);
    return Eigen::Map<Vec<S>>(data_.data() + e.offset, e.count());
  }
  Eigen::Map<const Vec<S>> block(std::size_t entry_idx) const {
    const auto& e = layout_.at(entry_idx);
    return Eigen::Map<const Vec<S>>(data_.data() + e.offset, e.count());
  }

  const ParamEntry& entry(const std::string& name) const {
    for (const auto& e : layout_) {
      if (e.name == name) return e;
    }
    throw ValidationError("param vector: no entry named " + name);
  }

  Eigen::Map<Vec<S>> block(const std::string& name) {
    const auto& e = entry(name);
    return Eigen::Map<Vec<S>>(data_.data() + e.offset, e.count());
  }
  Eigen::Map<const Vec<S>> block(const std::string& name) const {
    const auto& e = entry(name);
    return Eigen::Map<const Vec<S>>(data_.data() + e.offset, e.count());
  }

  template <typename T>
  ParamVector<T> cast() const {
    return ParamVector<T>(layout_, data_.template cast<T>());
  }

  bool same_layout(const ParamVector& other) const {
    if (layout_.size() != other.layout_.size()) return false;
    for (std::size_t i = 0; i < layout_.size(); ++i) {
      if (layout_[i].name != other.layout_[i].name || layout_[i].offset != other.layout_[i].offset ||
          layout_[i].shape != other.layout_[i].shape)
        return false;
    }
    return true;
  }

 private:
  void validate() const {
    // Offsets must tile [0, P) exactly, in order and without overlap.
    Eigen::Index expect = 0;
    for (const auto& e : layout_) {
      if (e.offset != expect) throw ValidationError("param vector: layout gap or overlap at " + e.name);
      expect += e.count();
    }
    if (expect != data_.size()) throw ValidationError("param vector: layout does not cover the data");
  }

  std::vector<ParamEntry> layout_;
  Vec<S> data_;
};

}  // namespace ntklab
