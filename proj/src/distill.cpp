#include "mmkd/distill.hpp"

#include <algorithm>
#include <cmath>

namespace mmkd {

void validate(const DistillConfig& config) {
  if (!(config.tau > 0.0))
    throw ConfigError("tau must be positive, got " +
                      std::to_string(config.tau));
  if (!(config.gamma > 0.0))
    throw ConfigError("gamma must be positive, got " +
                      std::to_string(config.gamma));
  if (!(config.lambda >= 0.0 && config.lambda <= 1.0))
    throw ConfigError("lambda must lie in [0, 1], got " +
                      std::to_string(config.lambda));
  if (config.holdout_size < 1)
    throw ConfigError("holdout_size must be positive, got " +
                      std::to_string(config.holdout_size));
}

void to_json(nlohmann::json& j, const DistillConfig& config) {
  j = nlohmann::json{{"tau", config.tau},
                     {"lambda", config.lambda},
                     {"gamma", config.gamma},
                     {"holdout_size", config.holdout_size}};
}

void from_json(const nlohmann::json& j, DistillConfig& config) {
  config.tau = j.value("tau", config.tau);
  config.lambda = j.value("lambda", config.lambda);
  config.gamma = j.value("gamma", config.gamma);
  config.holdout_size = j.value("holdout_size", config.holdout_size);
}

// ---- teacher weighting --------------------------------------------------------

double mean_cross_entropy(const TensorF& logits,
                          const std::vector<std::int64_t>& labels) {
  const std::int64_t B = logits.rows_before_last();
  const std::int64_t C = logits.last_dim();
  if (std::int64_t(labels.size()) != B)
    throw ShapeError("mean_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(B) + " rows");
  double total = 0.0;
  for (std::int64_t r = 0; r < B; ++r) {
    const float* row = logits.data() + r * C;
    if (labels[std::size_t(r)] < 0 || labels[std::size_t(r)] >= C)
      throw ContractError("mean_cross_entropy: label " +
                          std::to_string(labels[std::size_t(r)]) +
                          " out of range [0, " + std::to_string(C) + ")");
    double m = double(row[0]);
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, double(row[c]));
    double sum = 0.0;
    for (std::int64_t c = 0; c < C; ++c) sum += std::exp(double(row[c]) - m);
    total += m + std::log(sum) - double(row[labels[std::size_t(r)]]);
  }
  return total / double(B);
}

std::vector<double> estimate_teacher_errors(const std::vector<Model>& members,
                                            const Shard& holdout) {
  if (members.empty())
    throw ContractError("estimate_teacher_errors: no members");
  if (holdout.examples.empty())
    throw ContractError("estimate_teacher_errors: empty holdout");

  const DatasetConfig& cfg = holdout.config;
  const ViewParams eval_view = sample_view(0, ViewMode::kEval, cfg);
  std::vector<MultimodalExample> viewed;
  viewed.reserve(holdout.examples.size());
  for (const auto& ex : holdout.examples)
    viewed.push_back(apply_view(ex, eval_view));
  const BatchLabels labels = labels_of(viewed);

  constexpr std::size_t kBatch = 32;
  std::vector<double> errors;
  for (const Model& member : members) {
    double total = 0.0;
    for (std::size_t lo = 0; lo < viewed.size(); lo += kBatch) {
      const std::size_t hi = std::min(lo + kBatch, viewed.size());
      const std::vector<MultimodalExample> batch(viewed.begin() + long(lo),
                                                 viewed.begin() + long(hi));
      const HeadLogits out = forward_logits(
          member, member.config.modality, cfg, batch);
      const double n = double(hi - lo);
      if (member.config.heads == HeadMode::kSingle) {
        total += mean_cross_entropy(
                     *out.action, {labels.actions.begin() + long(lo),
                                   labels.actions.begin() + long(hi)}) *
                 n;
      } else {
        total += (mean_cross_entropy(
                      *out.noun, {labels.nouns.begin() + long(lo),
                                  labels.nouns.begin() + long(hi)}) +
                  mean_cross_entropy(
                      *out.verb, {labels.verbs.begin() + long(lo),
                                  labels.verbs.begin() + long(hi)})) *
                 n;
      }
    }
    errors.push_back(total / double(viewed.size()));
  }
  return errors;
}

std::vector<double> compute_teacher_weights(const std::vector<double>& errors,
                                            double gamma) {
  if (errors.empty())
    throw ContractError("compute_teacher_weights: no errors");
  if (!(gamma > 0.0))
    throw ConfigError("gamma must be positive, got " + std::to_string(gamma));
  std::vector<double> scores;
  scores.reserve(errors.size());
  for (double e : errors) scores.push_back(-e / gamma);
  const double m = *std::max_element(scores.begin(), scores.end());
  double sum = 0.0;
  for (double& s : scores) {
    s = std::exp(s - m);
    sum += s;
  }
  for (double& s : scores) s /= sum;
  return scores;
}

TeacherEnsemble make_ensemble(std::vector<Model> members, const Shard& holdout,
                              double gamma) {
  if (members.empty()) throw ContractError("make_ensemble: no members");
  for (const Model& m : members) {
    if (m.config.modality == Modality::kOmni)
      throw ContractError(
          "make_ensemble: the omnivorous model is not a per-modality teacher");
    if (m.config.heads != members.front().config.heads)
      throw ContractError("make_ensemble: members mix head modes");
  }
  std::sort(members.begin(), members.end(),
            [](const Model& a, const Model& b) {
              return int(a.config.modality) < int(b.config.modality);
            });
  for (std::size_t i = 1; i < members.size(); ++i)
    if (members[i].config.modality == members[i - 1].config.modality)
      throw ContractError("make_ensemble: two teachers for modality " +
                          to_string(members[i].config.modality));

  TeacherEnsemble ensemble;
  ensemble.errors = estimate_teacher_errors(members, holdout);
  ensemble.weights = compute_teacher_weights(ensemble.errors, gamma);
  ensemble.members = std::move(members);
  return ensemble;
}

nlohmann::json teacher_weights_json(const TeacherEnsemble& ensemble,
                                    double gamma, int holdout_size,
                                    std::uint64_t holdout_seed) {
  nlohmann::json j;
  for (std::size_t i = 0; i < ensemble.members.size(); ++i)
    j[to_string(ensemble.members[i].config.modality)] = {
        {"error", ensemble.errors[i]}, {"weight", ensemble.weights[i]}};
  j["gamma"] = gamma;
  j["Z"] = holdout_size;
  j["holdout_seed"] = holdout_seed;
  return j;
}

// ---- ensemble combination -----------------------------------------------------

EnsembleOutput ensemble_logits(const std::vector<TensorF>& member_logits,
                               const std::vector<double>& weights) {
  if (member_logits.empty())
    throw ContractError("ensemble_logits: no members");
  if (member_logits.size() != weights.size())
    throw ContractError("ensemble_logits: " +
                        std::to_string(member_logits.size()) +
                        " logit blocks for " + std::to_string(weights.size()) +
                        " weights");
  double wsum = 0.0;
  for (double w : weights) {
    if (w < 0.0)
      throw ContractError("ensemble_logits: negative weight " +
                          std::to_string(w));
    wsum += w;
  }
  if (std::abs(wsum - 1.0) > 1e-6)
    throw ContractError("ensemble_logits: weights sum to " +
                        std::to_string(wsum) + ", want 1");

  const Shape shape = member_logits.front().shape();
  for (const TensorF& t : member_logits)
    if (t.shape() != shape)
      throw ContractError("ensemble_logits: member shape " +
                          shape_str(t.shape()) + " does not match " +
                          shape_str(shape));

  TensorD sum(shape);
  for (std::size_t m = 0; m < member_logits.size(); ++m) {
    const float* src = member_logits[m].data();
    double* dst = sum.data();
    for (std::int64_t i = 0; i < sum.numel(); ++i)
      dst[i] += weights[m] * double(src[i]);
  }

  EnsembleOutput out{TensorF(shape), TensorD(shape)};
  for (std::int64_t i = 0; i < sum.numel(); ++i)
    out.logits.data()[i] = float(sum.data()[i]);

  const std::int64_t B = sum.rows_before_last(), C = sum.last_dim();
  for (std::int64_t r = 0; r < B; ++r) {
    const double* row = sum.data() + r * C;
    double* p = out.probabilities.data() + r * C;
    double m = row[0];
    for (std::int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
      p[c] = std::exp(row[c] - m);
      z += p[c];
    }
    for (std::int64_t c = 0; c < C; ++c) p[c] /= z;
  }
  return out;
}

DistillTargets ensemble_targets(const TeacherEnsemble& ensemble,
                                const DatasetConfig& data,
                                const std::vector<MultimodalExample>& viewed) {
  if (ensemble.members.empty())
    throw ContractError("ensemble_targets: empty ensemble");
  std::vector<TensorF> action, noun, verb;
  for (const Model& member : ensemble.members) {
    const HeadLogits out =
        forward_logits(member, member.config.modality, data, viewed);
    if (out.action) action.push_back(*out.action);
    if (out.noun) noun.push_back(*out.noun);
    if (out.verb) verb.push_back(*out.verb);
  }
  DistillTargets targets;
  if (!action.empty())
    targets.action = ensemble_logits(action, ensemble.weights).logits;
  if (!noun.empty()) {
    targets.noun = ensemble_logits(noun, ensemble.weights).logits;
    targets.verb = ensemble_logits(verb, ensemble.weights).logits;
  }
  return targets;
}

// ---- loss assembly ------------------------------------------------------------

double combined_loss(double ce, double kl, double lambda) {
  if (lambda == 0.0) return ce;
  if (lambda == 1.0) return kl;
  return lambda * kl + (1.0 - lambda) * ce;
}

Value<float> combined_loss(Value<float> ce, Value<float> kl, double lambda) {
  if (lambda == 0.0) return ce;
  if (lambda == 1.0) return kl;
  return add(scale(kl, float(lambda)), scale(ce, float(1.0 - lambda)));
}

Value<float> dual_head_loss(Value<float> noun_ce, Value<float> noun_kl,
                            Value<float> verb_ce, Value<float> verb_kl,
                            double lambda) {
  return add(combined_loss(noun_ce, noun_kl, lambda),
             combined_loss(verb_ce, verb_kl, lambda));
}

BatchLabels labels_of(const std::vector<MultimodalExample>& batch) {
  BatchLabels labels;
  for (const auto& ex : batch) {
    labels.nouns.push_back(ex.noun);
    labels.verbs.push_back(ex.verb);
    labels.actions.push_back(ex.action);
  }
  return labels;
}

Value<float> distill_loss(const HeadValues& student,
                          const DistillTargets& teacher,
                          const BatchLabels& labels,
                          const DistillConfig& config) {
  validate(config);
  const float tau = float(config.tau);
  if (student.action) {
    if (student.noun || student.verb)
      throw ContractError("distill_loss: student mixes head modes");
    if (config.lambda == 0.0)
      return cross_entropy(*student.action, labels.actions);
    if (!teacher.action)
      throw ContractError("distill_loss: teacher targets lack an action head");
    Value<float> kl = kd_kl(*student.action, *teacher.action, tau);
    if (config.lambda == 1.0) return kl;
    return combined_loss(cross_entropy(*student.action, labels.actions), kl,
                         config.lambda);
  }
  if (!student.noun || !student.verb)
    throw ContractError("distill_loss: student exposes no usable heads");
  if (config.lambda == 0.0)
    return add(cross_entropy(*student.noun, labels.nouns),
               cross_entropy(*student.verb, labels.verbs));
  if (!teacher.noun || !teacher.verb)
    throw ContractError(
        "distill_loss: teacher targets lack noun/verb heads");
  Value<float> noun_kl = kd_kl(*student.noun, *teacher.noun, tau);
  Value<float> verb_kl = kd_kl(*student.verb, *teacher.verb, tau);
  if (config.lambda == 1.0) return add(noun_kl, verb_kl);
  return dual_head_loss(cross_entropy(*student.noun, labels.nouns), noun_kl,
                        cross_entropy(*student.verb, labels.verbs), verb_kl,
                        config.lambda);
}

}  // namespace mmkd
