#include "mmkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mmkd/error.hpp"
#include "mmkd/tensor_ops.hpp"

namespace mmkd {

namespace {

void check_prob_matrix(const TensorD& probs,
                       const std::vector<std::int64_t>& labels,
                       const char* who) {
  if (probs.ndim() != 2)
    throw ShapeError(std::string(who) + ": want [N,C], got " +
                     shape_str(probs.shape()));
  if (std::int64_t(labels.size()) != probs.dim(0))
    throw ShapeError(std::string(who) + ": " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(probs.dim(0)) + " rows");
  const std::int64_t C = probs.dim(1);
  for (std::int64_t y : labels)
    if (y < 0 || y >= C)
      throw ContractError(std::string(who) + ": label " + std::to_string(y) +
                          " out of range [0, " + std::to_string(C) + ")");
}

// Right-closed bins ((k-1)/K, k/K]: the smallest k with conf <= k/K, found
// by direct comparison so boundary confidences land deterministically.
int bin_of(double confidence, int num_bins) {
  for (int k = 1; k < num_bins; ++k)
    if (confidence <= double(k) / double(num_bins)) return k - 1;
  return num_bins - 1;
}

}  // namespace

void to_json(nlohmann::json& j, const MetricsReport& report) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const PerClass& pc : report.per_class)
    per_class.push_back({pc.cls, pc.support, pc.accuracy});
  j = nlohmann::json{{"top1", report.top1},
                     {"top5", report.top5},
                     {"noun_top1", report.noun_top1},
                     {"verb_top1", report.verb_top1},
                     {"action_top1", report.action_top1},
                     {"ece", report.ece},
                     {"num_samples", report.num_samples},
                     {"num_bins", report.num_bins},
                     {"per_class", per_class}};
}

void from_json(const nlohmann::json& j, MetricsReport& report) {
  report.top1 = j.at("top1").get<double>();
  report.top5 = j.at("top5").get<double>();
  report.noun_top1 = j.at("noun_top1").get<double>();
  report.verb_top1 = j.at("verb_top1").get<double>();
  report.action_top1 = j.at("action_top1").get<double>();
  report.ece = j.at("ece").get<double>();
  report.num_samples = j.at("num_samples").get<std::int64_t>();
  report.num_bins = j.at("num_bins").get<int>();
  report.per_class.clear();
  for (const auto& row : j.at("per_class")) {
    PerClass pc;
    pc.cls = row.at(0).get<int>();
    pc.support = row.at(1).get<std::int64_t>();
    pc.accuracy = row.at(2).get<double>();
    report.per_class.push_back(pc);
  }
}

double topk_accuracy(const TensorD& probs,
                     const std::vector<std::int64_t>& labels, int k) {
  check_prob_matrix(probs, labels, "topk_accuracy");
  const std::int64_t N = probs.dim(0), C = probs.dim(1);
  if (k < 1 || k > C)
    throw ContractError("topk_accuracy: k = " + std::to_string(k) +
                        " outside [1, " + std::to_string(C) + "]");
  std::int64_t hits = 0;
  for (std::int64_t r = 0; r < N; ++r) {
    const auto top = topk_row(probs.data() + r * C, C, k);
    if (std::find(top.begin(), top.end(), labels[std::size_t(r)]) !=
        top.end())
      ++hits;
  }
  return N == 0 ? 0.0 : double(hits) / double(N);
}

double action_accuracy(const TensorD& noun_probs, const TensorD& verb_probs,
                       const std::vector<std::int64_t>& noun_labels,
                       const std::vector<std::int64_t>& verb_labels) {
  check_prob_matrix(noun_probs, noun_labels, "action_accuracy");
  check_prob_matrix(verb_probs, verb_labels, "action_accuracy");
  if (noun_probs.dim(0) != verb_probs.dim(0))
    throw ContractError("action_accuracy: " +
                        std::to_string(noun_probs.dim(0)) + " noun rows vs " +
                        std::to_string(verb_probs.dim(0)) + " verb rows");
  const std::int64_t N = noun_probs.dim(0);
  std::int64_t hits = 0;
  for (std::int64_t r = 0; r < N; ++r) {
    const bool noun_ok =
        argmax_row(noun_probs.data() + r * noun_probs.dim(1),
                   noun_probs.dim(1)) == noun_labels[std::size_t(r)];
    const bool verb_ok =
        argmax_row(verb_probs.data() + r * verb_probs.dim(1),
                   verb_probs.dim(1)) == verb_labels[std::size_t(r)];
    if (noun_ok && verb_ok) ++hits;
  }
  return N == 0 ? 0.0 : double(hits) / double(N);
}

double expected_calibration_error(const TensorD& probs,
                                  const std::vector<std::int64_t>& labels,
                                  int num_bins) {
  check_prob_matrix(probs, labels, "expected_calibration_error");
  if (num_bins < 1)
    throw ContractError("expected_calibration_error: need at least one bin");
  const std::int64_t N = probs.dim(0), C = probs.dim(1);

  std::vector<std::int64_t> count(std::size_t(num_bins), 0);
  std::vector<std::int64_t> correct(std::size_t(num_bins), 0);
  std::vector<double> confidence(std::size_t(num_bins), 0.0);

  for (std::int64_t r = 0; r < N; ++r) {
    const double* row = probs.data() + r * C;
    double sum = 0.0;
    for (std::int64_t c = 0; c < C; ++c) sum += row[c];
    if (std::abs(sum - 1.0) > 1e-4)
      throw ContractError("expected_calibration_error: row " +
                          std::to_string(r) + " sums to " +
                          std::to_string(sum) + ", want 1");
    const std::int64_t pred = argmax_row(row, C);
    const double conf = row[pred];
    const std::size_t bin = std::size_t(bin_of(conf, num_bins));
    count[bin] += 1;
    correct[bin] += pred == labels[std::size_t(r)] ? 1 : 0;
    confidence[bin] += conf;
  }

  double ece = 0.0;
  for (std::size_t bin = 0; bin < std::size_t(num_bins); ++bin) {
    if (count[bin] == 0) continue;
    const double acc = double(correct[bin]) / double(count[bin]);
    const double conf = confidence[bin] / double(count[bin]);
    ece += double(count[bin]) / double(N) * std::abs(acc - conf);
  }
  return ece;
}

namespace {

std::vector<PerClass> per_class_table(
    const std::vector<std::int64_t>& predictions,
    const std::vector<std::int64_t>& labels) {
  std::map<std::int64_t, std::pair<std::int64_t, std::int64_t>> stats;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& [support, hits] = stats[labels[i]];
    support += 1;
    hits += predictions[i] == labels[i] ? 1 : 0;
  }
  std::vector<PerClass> table;
  for (const auto& [cls, s] : stats)
    table.push_back(
        {int(cls), s.first, double(s.second) / double(s.first)});
  std::sort(table.begin(), table.end(),
            [](const PerClass& a, const PerClass& b) {
              if (a.support != b.support) return a.support > b.support;
              return a.cls < b.cls;
            });
  return table;
}

}  // namespace

MetricsReport action_metrics(const TensorD& action_probs,
                             const std::vector<std::int64_t>& noun_labels,
                             const std::vector<std::int64_t>& verb_labels,
                             int num_verbs, int num_bins) {
  if (num_verbs < 1)
    throw ContractError("action_metrics: num_verbs must be positive");
  if (noun_labels.size() != verb_labels.size())
    throw ShapeError("action_metrics: " + std::to_string(noun_labels.size()) +
                     " noun labels vs " + std::to_string(verb_labels.size()) +
                     " verb labels");
  if (action_probs.ndim() == 2 && action_probs.dim(1) % num_verbs != 0)
    throw ShapeError("action_metrics: " + std::to_string(action_probs.dim(1)) +
                     " classes do not decompose into verbs of " +
                     std::to_string(num_verbs));
  std::vector<std::int64_t> action_labels;
  action_labels.reserve(noun_labels.size());
  for (std::size_t i = 0; i < noun_labels.size(); ++i)
    action_labels.push_back(noun_labels[i] * num_verbs + verb_labels[i]);
  check_prob_matrix(action_probs, action_labels, "action_metrics");

  const std::int64_t N = action_probs.dim(0), C = action_probs.dim(1);
  const std::vector<std::int64_t> predictions = argmax_rows(action_probs);

  MetricsReport report;
  report.num_samples = N;
  report.num_bins = num_bins;
  report.top1 = topk_accuracy(action_probs, action_labels, 1);
  report.top5 = topk_accuracy(action_probs, action_labels, int(std::min<std::int64_t>(5, C)));
  report.action_top1 = report.top1;

  std::int64_t noun_hits = 0, verb_hits = 0;
  for (std::size_t i = 0; i < action_labels.size(); ++i) {
    if (predictions[i] / num_verbs == noun_labels[i]) ++noun_hits;
    if (predictions[i] % num_verbs == verb_labels[i]) ++verb_hits;
  }
  report.noun_top1 = N == 0 ? 0.0 : double(noun_hits) / double(N);
  report.verb_top1 = N == 0 ? 0.0 : double(verb_hits) / double(N);

  report.ece = expected_calibration_error(action_probs, action_labels,
                                          num_bins);
  report.per_class = per_class_table(predictions, action_labels);
  return report;
}

MetricsReport dual_metrics(const TensorD& noun_probs,
                           const TensorD& verb_probs,
                           const std::vector<std::int64_t>& noun_labels,
                           const std::vector<std::int64_t>& verb_labels,
                           int num_bins) {
  check_prob_matrix(noun_probs, noun_labels, "dual_metrics");
  check_prob_matrix(verb_probs, verb_labels, "dual_metrics");
  if (noun_probs.dim(0) != verb_probs.dim(0))
    throw ContractError("dual_metrics: " + std::to_string(noun_probs.dim(0)) +
                        " noun rows vs " + std::to_string(verb_probs.dim(0)) +
                        " verb rows");
  const std::int64_t N = noun_probs.dim(0);
  const std::int64_t Nn = noun_probs.dim(1), Nv = verb_probs.dim(1);

  // joint action distribution under head independence
  TensorD action_probs({N, Nn * Nv});
  for (std::int64_t r = 0; r < N; ++r) {
    const double* pn = noun_probs.data() + r * Nn;
    const double* pv = verb_probs.data() + r * Nv;
    double* pa = action_probs.data() + r * Nn * Nv;
    for (std::int64_t n = 0; n < Nn; ++n)
      for (std::int64_t v = 0; v < Nv; ++v) pa[n * Nv + v] = pn[n] * pv[v];
  }

  MetricsReport report =
      action_metrics(action_probs, noun_labels, verb_labels, int(Nv),
                     num_bins);
  // per-head accuracies come from the heads themselves
  std::int64_t noun_hits = 0, verb_hits = 0;
  for (std::int64_t r = 0; r < N; ++r) {
    if (argmax_row(noun_probs.data() + r * Nn, Nn) ==
        noun_labels[std::size_t(r)])
      ++noun_hits;
    if (argmax_row(verb_probs.data() + r * Nv, Nv) ==
        verb_labels[std::size_t(r)])
      ++verb_hits;
  }
  report.noun_top1 = N == 0 ? 0.0 : double(noun_hits) / double(N);
  report.verb_top1 = N == 0 ? 0.0 : double(verb_hits) / double(N);
  return report;
}

std::vector<ClassDelta> per_class_delta(const MetricsReport& a,
                                        const MetricsReport& b,
                                        int top_n) {
  if (a.num_samples != b.num_samples)
    throw ContractError("per_class_delta: reports cover " +
                        std::to_string(a.num_samples) + " vs " +
                        std::to_string(b.num_samples) + " samples");
  std::map<int, const PerClass*> other;
  for (const PerClass& pc : b.per_class) other[pc.cls] = &pc;

  std::vector<ClassDelta> deltas;
  for (const PerClass& pc : a.per_class) {
    const auto it = other.find(pc.cls);
    if (it == other.end() || it->second->support != pc.support)
      throw ContractError("per_class_delta: class " + std::to_string(pc.cls) +
                          " has mismatched support between reports");
    deltas.push_back({pc.cls, pc.support,
                      pc.accuracy - it->second->accuracy});
    if (int(deltas.size()) == top_n) break;
  }
  return deltas;
}

}  // namespace mmkd
