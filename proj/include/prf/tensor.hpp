// Copyright (c) the prf project authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cassert>
#include <cstdint>
#include <memory>
#include <vector>

#include "prf/errors.hpp"

namespace prf {

// Dense row-major double tensor. Copies are shallow (numpy-style shared
// buffers); use clone() for an independent copy. All pipeline math runs in
// double so that finite-difference checks are meaningful.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    size_ = 1;
    for (int d : shape_) {
      if (d <= 0) throw ContractError("Tensor: non-positive dimension");
      size_ *= d;
    }
    data_ = std::make_shared<std::vector<double>>(static_cast<std::size_t>(size_), 0.0);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : *t.data_) x = v;
    return t;
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = 1;
    for (int d : t.shape_) t.size_ *= d;
    if (t.size_ != static_cast<std::int64_t>(values.size()))
      throw ContractError("Tensor::from: shape/data size mismatch");
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  std::int64_t size() const { return size_; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }

  double& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

  double& at(int i0) { return (*data_)[static_cast<std::size_t>(i0)]; }
  double& at(int i0, int i1) {
    return (*data_)[static_cast<std::size_t>(i0) * shape_[1] + i1];
  }
  double& at(int i0, int i1, int i2) {
    return (*data_)[(static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2];
  }
  double& at(int i0, int i1, int i2, int i3) {
    return (*data_)[((static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2) *
                        shape_[3] +
                    i3];
  }
  double at(int i0) const { return (*data_)[static_cast<std::size_t>(i0)]; }
  double at(int i0, int i1) const {
    return (*data_)[static_cast<std::size_t>(i0) * shape_[1] + i1];
  }
  double at(int i0, int i1, int i2) const {
    return (*data_)[(static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2];
  }
  double at(int i0, int i1, int i2, int i3) const {
    return (*data_)[((static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2) *
                        shape_[3] +
                    i3];
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.size_ = size_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
  }

  // Same buffer, new shape (sizes must agree).
  Tensor reshaped(std::vector<int> shape) const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    if (n != size_) throw ContractError("Tensor::reshaped: size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = size_;
    t.data_ = data_;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) {
    for (auto& x : *data_) x = v;
  }

  void add_(const Tensor& o) {
    assert(size_ == o.size_);
    double* a = data();
    const double* b = o.data();
    for (std::int64_t i = 0; i < size_; ++i) a[i] += b[i];
  }

  void scale_(double s) {
    for (auto& x : *data_) x *= s;
  }

  bool all_finite() const;
  double abs_max() const;
  double sum() const;
  double mean() const { return size_ ? sum() / static_cast<double>(size_) : 0.0; }

  bool equals_bitwise(const Tensor& o) const;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::int64_t size_ = 0;
};

// Fixed 2-D sine/cosine positional encoding for a gh x gw grid, dim channels
// (must be divisible by 4). Row-major token order, shape [gh*gw, dim].
Tensor sinusoidal_position_encoding(int gh, int gw, int dim);

}  // namespace prf
