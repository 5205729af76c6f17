#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pcan/errors.hpp"

namespace pcan {

// Dense row-major tensor. The data length always equals the product of the
// shape; every dimension is positive.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), T{}) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_size(shape_)) {
      throw DimensionError("tensor: data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_to_string(shape_));
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, T v) {
    Tensor t(std::move(shape));
    for (T& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    std::size_t r = rows.size();
    std::size_t c = rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("tensor: ragged row list");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw ContractError("tensor: dim index out of range");
    return shape_[i];
  }

  std::size_t rows() const { require_rank(2); return shape_[0]; }
  std::size_t cols() const { require_rank(2); return shape_[1]; }

  std::span<T> values() { return {data_.data(), data_.size()}; }
  std::span<const T> values() const { return {data_.data(), data_.size()}; }

  T& operator()(std::size_t i) {
    assert(rank() == 1 && i < shape_[0]);
    return data_[i];
  }
  T operator()(std::size_t i) const {
    assert(rank() == 1 && i < shape_[0]);
    return data_[i];
  }
  T& operator()(std::size_t i, std::size_t j) {
    assert(rank() == 2 && i < shape_[0] && j < shape_[1]);
    return data_[i * shape_[1] + j];
  }
  T operator()(std::size_t i, std::size_t j) const {
    assert(rank() == 2 && i < shape_[0] && j < shape_[1]);
    return data_[i * shape_[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    assert(rank() == 3 && i < shape_[0] && j < shape_[1] && k < shape_[2]);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T operator()(std::size_t i, std::size_t j, std::size_t k) const {
    assert(rank() == 3 && i < shape_[0] && j < shape_[1] && k < shape_[2]);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool finite() const {
    for (T x : data_) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

  std::string shape_str() const { return shape_to_string(shape_); }

  bool operator==(const Tensor& o) const = default;

  static std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }

 private:
  void require_rank(std::size_t r) const {
    if (rank() != r) {
      throw ContractError("tensor: expected rank " + std::to_string(r) + ", have " + shape_str());
    }
  }

  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw DimensionError("tensor: empty shape");
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor: zero dimension in shape " + shape_to_string(shape));
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

}  // namespace pcan
