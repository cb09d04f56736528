#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "mmkd/error.hpp"

namespace mmkd {

// Dense row-major tensor templated on scalar type. Training code runs on
// float; test oracles instantiate the same code on double. Rank is dynamic
// (0..4 in practice). Storage is always contiguous, so any tensor can be
// viewed as an Eigen matrix over (rows = product of leading dims, cols =
// trailing dim) without copying.

template <class S>
using MatrixX =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<MatrixX<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const MatrixX<S>>;
template <class S>
using VecMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <class S>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

using Shape = std::vector<std::int64_t>;

// All tensor storage shares one allocator-enforced alignment, so Eigen's
// vectorized kernels peel buffers identically on every run and results are
// bit-reproducible.
template <class S>
using AlignedVector = std::vector<S, Eigen::aligned_allocator<S>>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), S(0)) {}

  Tensor(Shape shape, AlignedVector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor scalar(S value) { return Tensor({}, {value}); }

  static Tensor from(Shape shape, std::initializer_list<S> values) {
    return Tensor(std::move(shape), AlignedVector<S>(values));
  }

  const Shape& shape() const { return shape_; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const { return shape_.at(i); }
  std::int64_t numel() const {
    return static_cast<std::int64_t>(data_.size());
  }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  AlignedVector<S>& storage() { return data_; }
  const AlignedVector<S>& storage() const { return data_; }

  S& operator[](std::int64_t i) { return data_[i]; }
  const S& operator[](std::int64_t i) const { return data_[i]; }

  S& at(std::initializer_list<std::int64_t> idx) { return data_[offset(idx)]; }
  const S& at(std::initializer_list<std::int64_t> idx) const {
    return data_[offset(idx)];
  }

  S item() const {
    if (numel() != 1)
      throw ShapeError("item() on tensor with " + std::to_string(numel()) +
                       " elements");
    return data_[0];
  }

  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                       shape_str(new_shape));
    return Tensor(std::move(new_shape), data_);
  }

  // View the last dim as columns and everything before it as rows.
  std::int64_t last_dim() const {
    return shape_.empty() ? 1 : shape_.back();
  }
  std::int64_t rows_before_last() const {
    return shape_.empty() ? 1 : numel() / shape_.back();
  }

  MatMap<S> as_matrix(std::int64_t rows, std::int64_t cols) {
    check_view(rows, cols);
    return MatMap<S>(data_.data(), rows, cols);
  }
  ConstMatMap<S> as_matrix(std::int64_t rows, std::int64_t cols) const {
    check_view(rows, cols);
    return ConstMatMap<S>(data_.data(), rows, cols);
  }

  MatMap<S> as_rows() { return as_matrix(rows_before_last(), last_dim()); }
  ConstMatMap<S> as_rows() const {
    return as_matrix(rows_before_last(), last_dim());
  }

  VecMap<S> as_vector() { return VecMap<S>(data_.data(), numel()); }
  ConstVecMap<S> as_vector() const {
    return ConstVecMap<S>(data_.data(), numel());
  }

  template <class T>
  Tensor<T> cast() const {
    AlignedVector<T> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<T>(data_[i]);
    return Tensor<T>(shape_, std::move(out));
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  std::int64_t offset(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<std::int64_t>(idx.size()) != ndim())
      throw ShapeError("index rank " + std::to_string(idx.size()) +
                       " does not match tensor rank " + std::to_string(ndim()));
    std::int64_t off = 0;
    std::int64_t i = 0;
    for (auto v : idx) {
      if (v < 0 || v >= shape_[i])
        throw ShapeError("index out of range in dim " + std::to_string(i));
      off = off * shape_[i] + v;
      ++i;
    }
    return off;
  }

  void check_view(std::int64_t rows, std::int64_t cols) const {
    if (rows * cols != numel())
      throw ShapeError("matrix view " + std::to_string(rows) + "x" +
                       std::to_string(cols) + " does not cover " +
                       shape_str(shape_));
  }

  Shape shape_;
  AlignedVector<S> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace mmkd
