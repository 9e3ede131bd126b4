// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

#include "kiop/errors.hpp"

namespace kiop::nn {

/// Dense float32 tensor, contiguous row-major. Copies share storage;
/// use clone() for a deep copy.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape)
      : shape_(std::move(shape)),
        storage_(std::make_shared<std::vector<float>>(count_(shape_), 0.f)) {}

  static Tensor zeros(std::vector<std::int64_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::int64_t> shape, float v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static Tensor from(std::vector<std::int64_t> shape, std::vector<float> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<std::int64_t>(data.size()) != count_(t.shape_))
      throw ShapeMismatch("tensor data size does not match shape");
    t.storage_ = std::make_shared<std::vector<float>>(std::move(data));
    return t;
  }

  bool defined() const { return storage_ != nullptr; }
  const std::vector<std::int64_t> &shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return storage_ ? static_cast<std::int64_t>(storage_->size()) : 0; }

  float *data() { return storage_->data(); }
  const float *data() const { return storage_->data(); }
  float &at(std::int64_t i) { return (*storage_)[static_cast<std::size_t>(i)]; }
  float at(std::int64_t i) const { return (*storage_)[static_cast<std::size_t>(i)]; }

  void fill(float v) { std::fill(storage_->begin(), storage_->end(), v); }
  void zero() { fill(0.f); }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.storage_ = std::make_shared<std::vector<float>>(*storage_);
    return t;
  }

  Tensor reshaped(std::vector<std::int64_t> shape) const {
    if (count_(shape) != numel())
      throw ShapeMismatch("reshape element count mismatch");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool same_shape(const Tensor &o) const { return shape_ == o.shape_; }

private:
  static std::int64_t count_(const std::vector<std::int64_t> &s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  std::vector<std::int64_t> shape_;
  std::shared_ptr<std::vector<float>> storage_;
};

} // namespace kiop::nn
