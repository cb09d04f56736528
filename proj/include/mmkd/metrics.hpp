#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"

#include "mmkd/tensor.hpp"

namespace mmkd {

// Evaluation over probability rows, accumulated in 64-bit throughout:
// top-k accuracy, compositional action accuracy (noun and verb both right),
// Guo-style Expected Calibration Error over top-1 confidences, and per-class
// accuracy tables for before/after comparisons.

struct PerClass {
  int cls = 0;
  std::int64_t support = 0;
  double accuracy = 0.0;
};

struct MetricsReport {
  double top1 = 0.0;
  double top5 = 0.0;
  double noun_top1 = 0.0;
  double verb_top1 = 0.0;
  double action_top1 = 0.0;
  double ece = 0.0;
  std::int64_t num_samples = 0;
  int num_bins = 0;
  std::vector<PerClass> per_class;  // support descending, class ascending
};

void to_json(nlohmann::json& j, const MetricsReport& report);
void from_json(const nlohmann::json& j, MetricsReport& report);

// Fraction of rows whose label sits among the k highest-probability classes,
// ties resolved toward the lower class index.
double topk_accuracy(const TensorD& probs,
                     const std::vector<std::int64_t>& labels, int k);

// Fraction where both heads' top-1 predictions are simultaneously right.
double action_accuracy(const TensorD& noun_probs, const TensorD& verb_probs,
                       const std::vector<std::int64_t>& noun_labels,
                       const std::vector<std::int64_t>& verb_labels);

// Top-1 confidences binned into num_bins right-closed equal-width intervals
// ((k-1)/K, k/K]; ECE = sum_k |B_k|/N * |acc(B_k) - conf(B_k)|. Rows must
// sum to 1 within 1e-4.
double expected_calibration_error(const TensorD& probs,
                                  const std::vector<std::int64_t>& labels,
                                  int num_bins = 15);

// Report over a single action distribution [N, nouns*verbs]; noun and verb
// accuracies read off the decomposed top-1 action.
MetricsReport action_metrics(const TensorD& action_probs,
                             const std::vector<std::int64_t>& noun_labels,
                             const std::vector<std::int64_t>& verb_labels,
                             int num_verbs, int num_bins = 15);

// Report for a dual-head model: the action distribution is the outer product
// of the per-head distributions, per-head accuracies come from the heads.
MetricsReport dual_metrics(const TensorD& noun_probs,
                           const TensorD& verb_probs,
                           const std::vector<std::int64_t>& noun_labels,
                           const std::vector<std::int64_t>& verb_labels,
                           int num_bins = 15);

// Accuracy movement on the top_n best-supported classes, ordered by support.
struct ClassDelta {
  int cls = 0;
  std::int64_t support = 0;
  double delta = 0.0;  // accuracy(a) - accuracy(b)
};

std::vector<ClassDelta> per_class_delta(const MetricsReport& a,
                                        const MetricsReport& b,
                                        int top_n = 20);

}  // namespace mmkd
