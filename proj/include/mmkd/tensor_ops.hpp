#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mmkd/tensor.hpp"

namespace mmkd {

// Plain tensor math that runs outside the autodiff tape: inference-time
// softmax, argmax, top-k. Each row-wise op treats the last dim as the row.

template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  auto xin = x.as_rows();
  auto o = out.as_rows();
  for (Eigen::Index r = 0; r < xin.rows(); ++r) {
    S m = xin.row(r).maxCoeff();
    o.row(r) = (xin.row(r).array() - m).exp();
    o.row(r) /= o.row(r).sum();
  }
  return out;
}

template <class S>
Tensor<S> log_softmax_lastdim(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  auto xin = x.as_rows();
  auto o = out.as_rows();
  for (Eigen::Index r = 0; r < xin.rows(); ++r) {
    S m = xin.row(r).maxCoeff();
    S lse = std::log((xin.row(r).array() - m).exp().sum()) + m;
    o.row(r) = xin.row(r).array() - lse;
  }
  return out;
}

// Index of the row maximum; ties resolve to the lowest index.
template <class S>
std::int64_t argmax_row(const S* row, std::int64_t n) {
  std::int64_t best = 0;
  for (std::int64_t j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

template <class S>
std::vector<std::int64_t> argmax_rows(const Tensor<S>& x) {
  std::int64_t rows = x.rows_before_last();
  std::int64_t cols = x.last_dim();
  std::vector<std::int64_t> out(rows);
  for (std::int64_t r = 0; r < rows; ++r)
    out[r] = argmax_row(x.data() + r * cols, cols);
  return out;
}

// Indices of the k largest entries, descending; ties resolve to the lowest
// index (stable partial sort on (value desc, index asc)).
template <class S>
std::vector<std::int64_t> topk_row(const S* row, std::int64_t n,
                                   std::int64_t k) {
  std::vector<std::int64_t> idx(n);
  for (std::int64_t i = 0; i < n; ++i) idx[i] = i;
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                    [row](std::int64_t a, std::int64_t b) {
                      if (row[a] != row[b]) return row[a] > row[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b))
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<S> out(a.shape());
  out.as_vector() = a.as_vector() + b.as_vector();
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out(a.shape());
  out.as_vector() = a.as_vector() * c;
  return out;
}

}  // namespace mmkd
