#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "json.hpp"

#include "mmkd/distill.hpp"
#include "mmkd/metrics.hpp"
#include "mmkd/models.hpp"

namespace mmkd {

// Optimization machinery and the three training loops: per-modality teachers
// (pure cross-entropy), the omnivorous joint model (homogeneous batches,
// modality drawn per batch, epoch budget multiplied by the modality count),
// and student distillation against a frozen teacher ensemble. All three share
// one inner loop, so a lambda = 0 student run and a teacher run consume seeds
// identically and produce bit-identical logs.

struct TrainConfig {
  int epochs = 15;
  int batch_size = 32;
  double peak_lr = 1e-3;
  double weight_decay = 5e-2;
  double warmup_frac = 0.05;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
};

void validate(const TrainConfig& config);
void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

// ---- schedule and optimizer ---------------------------------------------------

// Linear 0 -> peak over the first ceil(warmup_frac * total) steps, then
// linear peak -> 0 over the remainder (reaching 0 one step past the end, so
// the peak is attained exactly once and every in-range step gets a positive
// rate after warmup).
double lr_at_step(std::int64_t step, std::int64_t total_steps, double peak,
                  double warmup_frac = 0.05);

// Scales every tensor by max_norm / norm when the global L2 norm (measured
// in 64-bit across all tensors) exceeds max_norm. Returns the pre-clip norm.
double clip_grad_norm(std::vector<TensorF>& grads, double max_norm = 5.0);

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-2;
  std::int64_t step = 0;        // completed updates
  std::vector<TensorF> m;       // first moments, parallel to the parameters
  std::vector<TensorF> v;       // second moments
};

OptimizerState optimizer_init(const std::vector<TensorF>& params,
                              const TrainConfig& config);

// One decoupled-weight-decay Adam update: params[i] -= lr * wd * params[i],
// then the bias-corrected moment update, all moment arithmetic in 64-bit.
void adamw_step(std::vector<TensorF>& params, const std::vector<TensorF>& grads,
                OptimizerState& state, double lr);

// ---- evaluation ---------------------------------------------------------------

// Deterministic single-view evaluation: every example gets the centered eval
// view, logits turn into 64-bit softmax rows, and the report composes noun
// and verb accuracies for either head mode.
MetricsReport evaluate_model(const Model& model, Modality source,
                             const Shard& shard, int batch_size = 32);

// ---- training loops -----------------------------------------------------------

// One line per epoch in the JSONL training log.
struct EpochRecord {
  int epoch = 0;
  std::int64_t step = 0;  // global step count at the end of the epoch
  double lr = 0.0;        // rate used by the epoch's final update
  double train_loss = 0.0;  // mean loss over the epoch's steps
  MetricsReport val;
};

void to_json(nlohmann::json& j, const EpochRecord& record);
void from_json(const nlohmann::json& j, EpochRecord& record);

struct TrainResult {
  Model model;
  std::vector<EpochRecord> log;
};

// Per-step instrumentation: fires after the loss is computed and before the
// update, exposing exactly the views fed to the student and (for distillation)
// every teacher member. Tests use it to pin view consistency and loss values.
struct StepInfo {
  int epoch = 0;
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  Modality batch_modality = Modality::kAppearance;
  const std::vector<std::size_t>* batch_indices = nullptr;  // into shard.examples
  const std::vector<ViewParams>* views = nullptr;           // one per example
};
using StepObserver = std::function<void(const StepInfo&)>;

// Cross-entropy training of one modality's model. The omnivorous tag is not
// a data modality and is rejected; use train_omnivore for the joint model.
TrainResult train_teacher(Modality modality, HeadMode heads,
                          const Splits& splits, const TrainConfig& config,
                          const StepObserver& observer = nullptr);

// Seed of the omnivore's per-batch modality-draw stream; recorded in run
// metadata so a draw sequence can be replayed independently.
std::uint64_t modality_draw_seed(std::uint64_t train_seed);

// Joint model over the given modalities, each batch homogeneous in one
// drawn modality, epoch budget (and schedule length) multiplied by the
// modality count. Validation always reads the appearance stream.
TrainResult train_omnivore(const std::vector<Modality>& modalities,
                           HeadMode heads, const Splits& splits,
                           const TrainConfig& config,
                           const StepObserver& observer = nullptr);

// Distills the frozen ensemble into an appearance student. Each step draws
// one view per example and reuses it for the student and every teacher
// member ("consistent teaching"); lambda = 0 skips the teachers entirely and
// reproduces train_teacher(appearance) bit for bit under the same seed.
TrainResult distill_student(const TeacherEnsemble& teacher,
                            const Splits& splits,
                            const DistillConfig& distill,
                            const TrainConfig& config,
                            const StepObserver& observer = nullptr);

}  // namespace mmkd
