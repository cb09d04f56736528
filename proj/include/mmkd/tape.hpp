#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "mmkd/tensor.hpp"

namespace mmkd {

// Reverse-mode autodiff on an append-only tape. Ops record their inputs and
// whatever forward state the backward pass needs (im2col buffers, softmax
// probabilities), then backward() walks the nodes in reverse append order and
// accumulates gradients. A tape is single-use: after backward() it is
// consumed and a second backward() throws StateError.
//
// Training uses Tape<float>; the same graph code instantiated on double
// serves as the reference implementation in tests.

template <class S>
class Tape;

template <class S>
struct Value {
  Tape<S>* tape = nullptr;
  std::int32_t idx = -1;

  const Tensor<S>& val() const;
  const Tensor<S>& grad() const;
  const Shape& shape() const { return val().shape(); }
};

namespace detail {

enum class Op : std::uint8_t {
  kLeaf,
  kMatmul,
  kConv2d,
  kRelu,
  kAdd,
  kMul,
  kScale,
  kBiasAdd,
  kReshape,
  kSpatialMean,
  kMeanRows,
  kGroupMean,
  kSumAll,
  kCrossEntropy,
  kKdKl,
};

template <class S>
struct Node {
  Op op = Op::kLeaf;
  std::int32_t a = -1;
  std::int32_t b = -1;
  Tensor<S> value;
  S c = S(0);                       // scalar parameter (scale, temperature)
  std::vector<std::int64_t> ints;   // op-specific integers (conv geometry, labels)
  Tensor<S> aux;                    // saved forward state (cols, probabilities)
  Tensor<S> aux2;                   // second saved buffer (student probabilities)
};

}  // namespace detail

template <class S>
class Tape {
 public:
  using Scalar = S;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value<S> leaf(Tensor<S> t) {
    detail::Node<S> n;
    n.op = detail::Op::kLeaf;
    n.value = std::move(t);
    return push(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  const Tensor<S>& value(std::int32_t i) const { return nodes_[i].value; }

  const Tensor<S>& grad(std::int32_t i) const {
    if (!consumed_)
      throw StateError("gradient requested before backward() ran");
    return grads_[i];
  }

  void backward(Value<S> loss) {
    if (loss.tape != this)
      throw ContractError("backward() on a value from a different tape");
    if (consumed_)
      throw StateError("backward() called twice on the same tape");
    if (nodes_[loss.idx].value.numel() != 1)
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(nodes_[loss.idx].value.shape()));
    grads_.resize(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      grads_[i] = Tensor<S>(nodes_[i].value.shape());
    grads_[loss.idx][0] = S(1);
    for (std::int32_t i = static_cast<std::int32_t>(nodes_.size()) - 1; i >= 0;
         --i)
      backward_node(i);
    consumed_ = true;
  }

  Value<S> push(detail::Node<S> n) {
    if (consumed_)
      throw StateError("op recorded on a consumed tape");
    nodes_.push_back(std::move(n));
    return Value<S>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  detail::Node<S>& node(std::int32_t i) { return nodes_[i]; }

 private:
  void backward_node(std::int32_t i);

  Tensor<S>& g(std::int32_t i) { return grads_[i]; }

  std::vector<detail::Node<S>> nodes_;
  std::vector<Tensor<S>> grads_;
  bool consumed_ = false;
};

template <class S>
const Tensor<S>& Value<S>::val() const {
  return tape->value(idx);
}

template <class S>
const Tensor<S>& Value<S>::grad() const {
  return tape->grad(idx);
}

namespace detail {

template <class S>
void check_same_tape(Value<S> a, Value<S> b) {
  if (a.tape != b.tape)
    throw ContractError("operands live on different tapes");
}

}  // namespace detail

// ---- ops ------------------------------------------------------------------

template <class S>
Value<S> matmul(Value<S> a, Value<S> b) {
  detail::check_same_tape(a, b);
  const auto& av = a.val();
  const auto& bv = b.val();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  detail::Node<S> n;
  n.op = detail::Op::kMatmul;
  n.a = a.idx;
  n.b = b.idx;
  n.value = Tensor<S>({av.dim(0), bv.dim(1)});
  n.value.as_rows() = av.as_rows() * bv.as_rows();
  return a.tape->push(std::move(n));
}

// Valid (no-padding) cross-correlation with square stride. x is either one
// sample [C_in, H, W] or a batch [N, C_in, H, W]; k is [C_out, C_in, kh, kw].
// Output is [C_out, H', W'] resp. [N, C_out, H', W'] with
// H' = (H - kh) / stride + 1. Each sample is lowered to an im2col matrix
// (rows = output positions, cols = receptive-field taps) followed by one
// GEMM; the cols buffers are kept for backward.
template <class S>
Value<S> conv2d(Value<S> x, Value<S> k, std::int64_t stride) {
  detail::check_same_tape(x, k);
  const auto& xv = x.val();
  const auto& kv = k.val();
  const bool batched = xv.ndim() == 4;
  if ((xv.ndim() != 3 && xv.ndim() != 4) || kv.ndim() != 4)
    throw ShapeError("conv2d: want x [C,H,W] or [N,C,H,W] and k "
                     "[Cout,Cin,kh,kw], got " +
                     shape_str(xv.shape()) + " and " + shape_str(kv.shape()));
  const std::int64_t N = batched ? xv.dim(0) : 1;
  const std::int64_t C = xv.dim(batched ? 1 : 0), H = xv.dim(batched ? 2 : 1),
                     W = xv.dim(batched ? 3 : 2);
  const std::int64_t Cout = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
  if (C != kv.dim(1))
    throw ShapeError("conv2d: channel mismatch between input " +
                     shape_str(xv.shape()) + " and kernel " +
                     shape_str(kv.shape()));
  if (kh > H || kw > W)
    throw ShapeError("conv2d: kernel " + shape_str(kv.shape()) +
                     " larger than input " + shape_str(xv.shape()));
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  const std::int64_t Hp = (H - kh) / stride + 1;
  const std::int64_t Wp = (W - kw) / stride + 1;
  const std::int64_t P = Hp * Wp, Q = C * kh * kw;

  detail::Node<S> n;
  n.op = detail::Op::kConv2d;
  n.a = x.idx;
  n.b = k.idx;
  n.ints = {N, C, H, W, Cout, kh, kw, stride, Hp, Wp};
  n.aux = Tensor<S>({N * P, Q});
  n.value = batched ? Tensor<S>({N, Cout, Hp, Wp})
                    : Tensor<S>({Cout, Hp, Wp});

  ConstMatMap<S> kmat(kv.data(), Cout, Q);
  for (std::int64_t s = 0; s < N; ++s) {
    S* cols = n.aux.data() + s * P * Q;
    const S* xin = xv.data() + s * C * H * W;
    for (std::int64_t hp = 0; hp < Hp; ++hp)
      for (std::int64_t wp = 0; wp < Wp; ++wp) {
        S* row = cols + (hp * Wp + wp) * Q;
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t ki = 0; ki < kh; ++ki) {
            const S* src = xin + (c * H + hp * stride + ki) * W + wp * stride;
            S* dst = row + (c * kh + ki) * kw;
            for (std::int64_t kj = 0; kj < kw; ++kj) dst[kj] = src[kj];
          }
      }
    ConstMatMap<S> colsm(cols, P, Q);
    MatMap<S> out(n.value.data() + s * Cout * P, Cout, P);
    out.noalias() = kmat * colsm.transpose();
  }
  return x.tape->push(std::move(n));
}

template <class S>
Value<S> relu(Value<S> x) {
  detail::Node<S> n;
  n.op = detail::Op::kRelu;
  n.a = x.idx;
  n.value = Tensor<S>(x.val().shape());
  n.value.as_vector() = x.val().as_vector().cwiseMax(S(0));
  return x.tape->push(std::move(n));
}

template <class S>
Value<S> add(Value<S> a, Value<S> b) {
  detail::check_same_tape(a, b);
  if (!a.val().same_shape(b.val()))
    throw ShapeError("add: shape mismatch " + shape_str(a.val().shape()) +
                     " vs " + shape_str(b.val().shape()));
  detail::Node<S> n;
  n.op = detail::Op::kAdd;
  n.a = a.idx;
  n.b = b.idx;
  n.value = Tensor<S>(a.val().shape());
  n.value.as_vector() = a.val().as_vector() + b.val().as_vector();
  return a.tape->push(std::move(n));
}

template <class S>
Value<S> mul(Value<S> a, Value<S> b) {
  detail::check_same_tape(a, b);
  if (!a.val().same_shape(b.val()))
    throw ShapeError("mul: shape mismatch " + shape_str(a.val().shape()) +
                     " vs " + shape_str(b.val().shape()));
  detail::Node<S> n;
  n.op = detail::Op::kMul;
  n.a = a.idx;
  n.b = b.idx;
  n.value = Tensor<S>(a.val().shape());
  n.value.as_vector() =
      a.val().as_vector().cwiseProduct(b.val().as_vector());
  return a.tape->push(std::move(n));
}

template <class S>
Value<S> scale(Value<S> x, S c) {
  detail::Node<S> n;
  n.op = detail::Op::kScale;
  n.a = x.idx;
  n.c = c;
  n.value = Tensor<S>(x.val().shape());
  n.value.as_vector() = x.val().as_vector() * c;
  return x.tape->push(std::move(n));
}

// x: [..., n] + b: [n], broadcast over leading dims.
template <class S>
Value<S> bias_add(Value<S> x, Value<S> b) {
  detail::check_same_tape(x, b);
  const auto& xv = x.val();
  const auto& bv = b.val();
  if (bv.ndim() != 1 || xv.last_dim() != bv.dim(0))
    throw ShapeError("bias_add: " + shape_str(xv.shape()) + " + " +
                     shape_str(bv.shape()));
  detail::Node<S> n;
  n.op = detail::Op::kBiasAdd;
  n.a = x.idx;
  n.b = b.idx;
  n.value = Tensor<S>(xv.shape());
  n.value.as_rows() = xv.as_rows().rowwise() + bv.as_vector().transpose();
  return x.tape->push(std::move(n));
}

template <class S>
Value<S> reshape(Value<S> x, Shape new_shape) {
  detail::Node<S> n;
  n.op = detail::Op::kReshape;
  n.a = x.idx;
  n.value = x.val().reshaped(std::move(new_shape));
  return x.tape->push(std::move(n));
}

// [N, C, H, W] -> [N, C], mean over the spatial grid.
template <class S>
Value<S> spatial_mean(Value<S> x) {
  const auto& xv = x.val();
  if (xv.ndim() != 4)
    throw ShapeError("spatial_mean: want [N,C,H,W], got " +
                     shape_str(xv.shape()));
  const std::int64_t N = xv.dim(0), C = xv.dim(1), A = xv.dim(2) * xv.dim(3);
  detail::Node<S> n;
  n.op = detail::Op::kSpatialMean;
  n.a = x.idx;
  n.value = Tensor<S>({N, C});
  n.value.as_vector() =
      xv.as_matrix(N * C, A).rowwise().mean();
  return x.tape->push(std::move(n));
}

// [R, n] -> [n], mean over rows.
template <class S>
Value<S> mean_rows(Value<S> x) {
  const auto& xv = x.val();
  if (xv.ndim() != 2)
    throw ShapeError("mean_rows: want [R,n], got " + shape_str(xv.shape()));
  detail::Node<S> n;
  n.op = detail::Op::kMeanRows;
  n.a = x.idx;
  n.value = Tensor<S>({xv.dim(1)});
  n.value.as_vector() = xv.as_rows().colwise().mean().transpose();
  return x.tape->push(std::move(n));
}

// [G*g, n] -> [G, n]: mean over each consecutive run of g rows. Pools frames
// into clips (or boxes into frames) without collapsing the batch dimension.
template <class S>
Value<S> group_mean(Value<S> x, std::int64_t group_size) {
  const auto& xv = x.val();
  if (xv.ndim() != 2)
    throw ShapeError("group_mean: want [R,n], got " + shape_str(xv.shape()));
  if (group_size < 1 || xv.dim(0) % group_size != 0)
    throw ShapeError("group_mean: " + std::to_string(xv.dim(0)) +
                     " rows not divisible into groups of " +
                     std::to_string(group_size));
  const std::int64_t G = xv.dim(0) / group_size;
  detail::Node<S> n;
  n.op = detail::Op::kGroupMean;
  n.a = x.idx;
  n.ints = {group_size};
  n.value = Tensor<S>({G, xv.dim(1)});
  auto xm = xv.as_rows();
  auto ym = n.value.as_rows();
  for (std::int64_t i = 0; i < G; ++i)
    ym.row(i) = xm.middleRows(i * group_size, group_size).colwise().mean();
  return x.tape->push(std::move(n));
}

template <class S>
Value<S> sum_all(Value<S> x) {
  detail::Node<S> n;
  n.op = detail::Op::kSumAll;
  n.a = x.idx;
  n.value = Tensor<S>::scalar(x.val().as_vector().sum());
  return x.tape->push(std::move(n));
}

namespace detail {

template <class S>
Tensor<S> stable_softmax(const Tensor<S>& logits) {
  Tensor<S> probs(logits.shape());
  auto lin = logits.as_rows();
  auto p = probs.as_rows();
  for (Eigen::Index r = 0; r < lin.rows(); ++r) {
    S m = lin.row(r).maxCoeff();
    p.row(r) = (lin.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return probs;
}

}  // namespace detail

// Mean cross-entropy over rows: logits [R, C] (or [C]), one label per row.
template <class S>
Value<S> cross_entropy(Value<S> logits,
                       const std::vector<std::int64_t>& labels) {
  const auto& lv = logits.val();
  const std::int64_t R = lv.rows_before_last(), C = lv.last_dim();
  if (static_cast<std::int64_t>(labels.size()) != R)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(R) + " rows");
  for (auto y : labels)
    if (y < 0 || y >= C)
      throw ContractError("cross_entropy: label " + std::to_string(y) +
                          " out of range [0, " + std::to_string(C) + ")");
  detail::Node<S> n;
  n.op = detail::Op::kCrossEntropy;
  n.a = logits.idx;
  n.aux = detail::stable_softmax(lv);
  n.ints.assign(labels.begin(), labels.end());
  S loss = S(0);
  auto lin = lv.as_rows();
  for (std::int64_t r = 0; r < R; ++r) {
    S m = lin.row(r).maxCoeff();
    S lse = std::log((lin.row(r).array() - m).exp().sum()) + m;
    loss += lse - lin(r, labels[r]);
  }
  n.value = Tensor<S>::scalar(loss / static_cast<S>(R));
  return logits.tape->push(std::move(n));
}

// Distillation term: tau^2 * mean over rows of KL(p || q) where
// p = softmax(teacher / tau) and q = softmax(student / tau). The teacher is
// plain data, not a tape value, so no gradient flows into it.
template <class S>
Value<S> kd_kl(Value<S> student_logits, const Tensor<S>& teacher_logits,
               S tau) {
  if (tau <= S(0)) throw ContractError("kd_kl: tau must be positive");
  const auto& sv = student_logits.val();
  if (!sv.same_shape(teacher_logits))
    throw ShapeError("kd_kl: student " + shape_str(sv.shape()) +
                     " vs teacher " + shape_str(teacher_logits.shape()));
  const std::int64_t R = sv.rows_before_last(), C = sv.last_dim();

  Tensor<S> ssoft(sv.shape()), tsoft(sv.shape());
  ssoft.as_vector() = sv.as_vector() / tau;
  tsoft.as_vector() = teacher_logits.as_vector() / tau;

  detail::Node<S> n;
  n.op = detail::Op::kKdKl;
  n.a = student_logits.idx;
  n.c = tau;
  n.aux = detail::stable_softmax(tsoft);   // p, teacher
  n.aux2 = detail::stable_softmax(ssoft);  // q, student

  // KL through log-probabilities: p can have zero entries (p log p -> 0).
  S acc = S(0);
  auto srows = ssoft.as_rows();
  auto trows = tsoft.as_rows();
  auto p = n.aux.as_rows();
  for (std::int64_t r = 0; r < R; ++r) {
    S ms = srows.row(r).maxCoeff();
    S lses = std::log((srows.row(r).array() - ms).exp().sum()) + ms;
    S mt = trows.row(r).maxCoeff();
    S lset = std::log((trows.row(r).array() - mt).exp().sum()) + mt;
    for (std::int64_t j = 0; j < C; ++j) {
      S pj = p(r, j);
      if (pj > S(0))
        acc += pj * ((trows(r, j) - lset) - (srows(r, j) - lses));
    }
  }
  n.value = Tensor<S>::scalar(tau * tau * acc / static_cast<S>(R));
  return student_logits.tape->push(std::move(n));
}

// ---- backward dispatch ------------------------------------------------------

template <class S>
void Tape<S>::backward_node(std::int32_t i) {
  using detail::Op;
  detail::Node<S>& n = nodes_[i];
  const Tensor<S>& gy = grads_[i];
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kMatmul: {
      auto A = nodes_[n.a].value.as_rows();
      auto B = nodes_[n.b].value.as_rows();
      auto G = gy.as_rows();
      g(n.a).as_rows().noalias() += G * B.transpose();
      g(n.b).as_rows().noalias() += A.transpose() * G;
      break;
    }
    case Op::kConv2d: {
      const std::int64_t N = n.ints[0], C = n.ints[1], H = n.ints[2],
                         W = n.ints[3], Cout = n.ints[4], kh = n.ints[5],
                         kw = n.ints[6], stride = n.ints[7], Hp = n.ints[8],
                         Wp = n.ints[9];
      const std::int64_t P = Hp * Wp, Q = C * kh * kw;
      MatMap<S> gk(g(n.b).data(), Cout, Q);
      Tensor<S> gcols({P, Q});
      for (std::int64_t s = 0; s < N; ++s) {
        ConstMatMap<S> gys(gy.data() + s * Cout * P, Cout, P);
        ConstMatMap<S> cols(n.aux.data() + s * P * Q, P, Q);
        gk.noalias() += gys * cols;
        gcols.as_rows().noalias() =
            gys.transpose() * ConstMatMap<S>(nodes_[n.b].value.data(), Cout, Q);
        S* gx = g(n.a).data() + s * C * H * W;
        for (std::int64_t hp = 0; hp < Hp; ++hp)
          for (std::int64_t wp = 0; wp < Wp; ++wp) {
            const S* row = gcols.data() + (hp * Wp + wp) * Q;
            for (std::int64_t c = 0; c < C; ++c)
              for (std::int64_t ki = 0; ki < kh; ++ki) {
                S* dst = gx + (c * H + hp * stride + ki) * W + wp * stride;
                const S* src = row + (c * kh + ki) * kw;
                for (std::int64_t kj = 0; kj < kw; ++kj) dst[kj] += src[kj];
              }
          }
      }
      break;
    }
    case Op::kRelu: {
      auto xin = nodes_[n.a].value.as_vector();
      g(n.a).as_vector().array() +=
          gy.as_vector().array() * (xin.array() > S(0)).template cast<S>();
      break;
    }
    case Op::kAdd:
      g(n.a).as_vector() += gy.as_vector();
      g(n.b).as_vector() += gy.as_vector();
      break;
    case Op::kMul:
      g(n.a).as_vector().array() +=
          gy.as_vector().array() * nodes_[n.b].value.as_vector().array();
      g(n.b).as_vector().array() +=
          gy.as_vector().array() * nodes_[n.a].value.as_vector().array();
      break;
    case Op::kScale:
      g(n.a).as_vector() += gy.as_vector() * n.c;
      break;
    case Op::kBiasAdd:
      g(n.a).as_vector() += gy.as_vector();
      g(n.b).as_vector() += gy.as_rows().colwise().sum().transpose();
      break;
    case Op::kReshape:
      g(n.a).as_vector() += gy.as_vector();
      break;
    case Op::kSpatialMean: {
      const auto& xs = nodes_[n.a].value.shape();
      const std::int64_t NC = xs[0] * xs[1], A = xs[2] * xs[3];
      auto gx = g(n.a).as_matrix(NC, A);
      gx.colwise() += gy.as_vector() / static_cast<S>(A);
      break;
    }
    case Op::kMeanRows: {
      auto gx = g(n.a).as_rows();
      gx.rowwise() +=
          gy.as_vector().transpose() / static_cast<S>(gx.rows());
      break;
    }
    case Op::kGroupMean: {
      const std::int64_t gsz = n.ints[0];
      auto gx = g(n.a).as_rows();
      auto gym = gy.as_rows();
      for (std::int64_t i = 0; i < gym.rows(); ++i)
        gx.middleRows(i * gsz, gsz).rowwise() +=
            gym.row(i) / static_cast<S>(gsz);
      break;
    }
    case Op::kSumAll:
      g(n.a).as_vector().array() += gy[0];
      break;
    case Op::kCrossEntropy: {
      const std::int64_t R = n.aux.rows_before_last();
      const S w = gy[0] / static_cast<S>(R);
      auto gx = g(n.a).as_rows();
      auto q = n.aux.as_rows();
      gx += q * w;
      for (std::int64_t r = 0; r < R; ++r)
        gx(r, n.ints[r]) -= w;
      break;
    }
    case Op::kKdKl: {
      const std::int64_t R = n.aux.rows_before_last();
      // d/ds [tau^2 * KL] = tau * (q - p), averaged over rows.
      const S w = gy[0] * n.c / static_cast<S>(R);
      g(n.a).as_vector() +=
          (n.aux2.as_vector() - n.aux.as_vector()) * w;
      break;
    }
  }
}

}  // namespace mmkd
