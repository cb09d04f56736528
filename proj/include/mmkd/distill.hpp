#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "json.hpp"

#include "mmkd/models.hpp"

namespace mmkd {

// Knowledge-distillation math: the temperature-softened KL objective, its
// blend with cross-entropy, and the holdout-weighted teacher ensemble. A
// student minimizes
//
//     L = lambda * tau^2 * KL(p_t || p_s) + (1 - lambda) * CE(student, y)
//
// where both distributions are softened by tau before the KL. The teacher is
// a weighted logit average over frozen per-modality models; each weight comes
// from a softmax over negative holdout cross-entropies at temperature gamma,
// so cheaper-to-trust teachers speak louder and gamma -> infinity flattens
// the ensemble to uniform.

struct DistillConfig {
  double tau = 10.0;
  double lambda = 0.8;
  double gamma = 1.0;
  int holdout_size = 256;  // Z, recorded alongside the weights
};

void validate(const DistillConfig& config);
void to_json(nlohmann::json& j, const DistillConfig& config);
void from_json(const nlohmann::json& j, DistillConfig& config);

// ---- teacher weighting --------------------------------------------------------

// Mean 64-bit cross-entropy of raw logits [B,C] against labels; the building
// block for holdout error estimation (and tests).
double mean_cross_entropy(const TensorF& logits,
                          const std::vector<std::int64_t>& labels);

// e^m: mean eval-view cross-entropy of each member over the holdout. Members
// with dual heads contribute noun CE + verb CE per example.
std::vector<double> estimate_teacher_errors(const std::vector<Model>& members,
                                            const Shard& holdout);

// w^m = exp(-e^m / gamma) / sum_j exp(-e^j / gamma).
std::vector<double> compute_teacher_weights(const std::vector<double>& errors,
                                            double gamma);

struct TeacherEnsemble {
  std::vector<Model> members;   // frozen, ordered by modality
  std::vector<double> errors;   // e^m, holdout mean CE
  std::vector<double> weights;  // w^m, simplex
};

// Orders members canonically, estimates errors on the holdout, and weights
// them at temperature gamma. Members must share a head mode and cover each
// modality at most once.
TeacherEnsemble make_ensemble(std::vector<Model> members, const Shard& holdout,
                              double gamma);

// The weights sidecar written next to teacher checkpoints.
nlohmann::json teacher_weights_json(const TeacherEnsemble& ensemble,
                                    double gamma, int holdout_size,
                                    std::uint64_t holdout_seed);

// ---- ensemble combination -----------------------------------------------------

struct EnsembleOutput {
  TensorF logits;         // weighted logit sum; what kd_kl_loss consumes
  TensorD probabilities;  // softmax of the sum, accumulated in 64-bit
};

EnsembleOutput ensemble_logits(const std::vector<TensorF>& member_logits,
                               const std::vector<double>& weights);

// Teacher targets for one view-consistent batch: every member sees exactly
// the examples the student sees.
struct DistillTargets {
  std::optional<TensorF> action;
  std::optional<TensorF> noun;
  std::optional<TensorF> verb;
};

DistillTargets ensemble_targets(const TeacherEnsemble& ensemble,
                                const DatasetConfig& data,
                                const std::vector<MultimodalExample>& viewed);

// ---- loss assembly ------------------------------------------------------------

// lambda * kl + (1 - lambda) * ce. The endpoints return the existing node
// untouched, so lambda 0 / 1 are bit-identical to pure CE / pure KL.
double combined_loss(double ce, double kl, double lambda);
Value<float> combined_loss(Value<float> ce, Value<float> kl, double lambda);

// Sum of the per-head blends for a compositional task.
Value<float> dual_head_loss(Value<float> noun_ce, Value<float> noun_kl,
                            Value<float> verb_ce, Value<float> verb_kl,
                            double lambda);

struct BatchLabels {
  std::vector<std::int64_t> nouns;
  std::vector<std::int64_t> verbs;
  std::vector<std::int64_t> actions;
};

BatchLabels labels_of(const std::vector<MultimodalExample>& batch);

// The full student objective for one batch. Head modes of student logits,
// teacher targets, and the model must agree; mismatches are contract errors.
Value<float> distill_loss(const HeadValues& student,
                          const DistillTargets& teacher,
                          const BatchLabels& labels,
                          const DistillConfig& config);

}  // namespace mmkd
