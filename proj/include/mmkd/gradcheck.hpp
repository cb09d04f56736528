#pragma once

#include <cstddef>
#include <vector>

#include "mmkd/tape.hpp"

namespace mmkd {

// Finite-difference gradient checking. A builder is a generic callable
//
//   build(Tape<S>& tape, const std::vector<double>& theta) -> BuiltNet<S>
//
// that lays the same graph on whatever scalar type the tape carries, reading
// all trainable values from the flat vector `theta`. The check runs the
// float32 autodiff backward once and compares each parameter gradient
// against central differences of the float64 forward pass.

template <class S>
struct BuiltNet {
  Value<S> loss;
  std::vector<Value<S>> params;  // leaves, in theta order
};

// Reads shape_numel(shape) entries of theta starting at cursor into a new
// leaf, advancing cursor. Builders use this to slice theta consistently.
template <class S>
Value<S> param_leaf(Tape<S>& tape, const std::vector<double>& theta,
                    std::size_t& cursor, Shape shape) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  if (cursor + n > theta.size())
    throw ContractError("param_leaf: theta exhausted");
  Tensor<S> t(std::move(shape));
  for (std::size_t i = 0; i < n; ++i)
    t[static_cast<std::int64_t>(i)] = static_cast<S>(theta[cursor + i]);
  cursor += n;
  return tape.leaf(std::move(t));
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_index = 0;
  std::size_t num_checked = 0;
};

template <class Builder>
GradCheckReport check_gradients(Builder&& build, std::vector<double> theta,
                                double h = 1e-3, double rel_floor = 1e-2) {
  // Autodiff gradient on float32.
  std::vector<double> ad;
  {
    Tape<float> tape;
    BuiltNet<float> net = build(tape, theta);
    tape.backward(net.loss);
    for (const auto& p : net.params) {
      const auto& g = p.grad();
      for (std::int64_t i = 0; i < g.numel(); ++i)
        ad.push_back(static_cast<double>(g[i]));
    }
  }
  if (ad.size() != theta.size())
    throw ContractError("gradcheck: builder consumed " +
                        std::to_string(ad.size()) + " params, theta has " +
                        std::to_string(theta.size()));

  auto eval = [&](const std::vector<double>& th) {
    Tape<double> tape;
    BuiltNet<double> net = build(tape, th);
    return net.loss.val().item();
  };

  GradCheckReport report;
  report.num_checked = theta.size();
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + h;
    const double fp = eval(theta);
    theta[i] = saved - h;
    const double fm = eval(theta);
    theta[i] = saved;
    const double fd = (fp - fm) / (2.0 * h);
    const double abs_err = std::abs(ad[i] - fd);
    const double rel =
        abs_err / std::max({std::abs(ad[i]), std::abs(fd), rel_floor});
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_index = i;
    }
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
  }
  return report;
}

}  // namespace mmkd
