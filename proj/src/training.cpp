#include "mmkd/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mmkd/error.hpp"
#include "mmkd/rng.hpp"
#include "mmkd/tape.hpp"

namespace mmkd {

void validate(const TrainConfig& config) {
  if (config.epochs < 0)
    throw ConfigError("epochs must be >= 0, got " + std::to_string(config.epochs));
  if (config.batch_size < 1)
    throw ConfigError("batch_size must be >= 1, got " +
                      std::to_string(config.batch_size));
  if (!(config.peak_lr > 0.0))
    throw ConfigError("peak_lr must be positive");
  if (config.weight_decay < 0.0)
    throw ConfigError("weight_decay must be >= 0");
  if (!(config.warmup_frac > 0.0) || !(config.warmup_frac < 1.0))
    throw ConfigError("warmup_frac must lie in (0, 1)");
  if (!(config.clip_norm > 0.0))
    throw ConfigError("clip_norm must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& config) {
  j = nlohmann::json{{"epochs", config.epochs},
                     {"batch_size", config.batch_size},
                     {"peak_lr", config.peak_lr},
                     {"weight_decay", config.weight_decay},
                     {"warmup_frac", config.warmup_frac},
                     {"clip_norm", config.clip_norm},
                     {"seed", config.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& config) {
  config.epochs = j.value("epochs", config.epochs);
  config.batch_size = j.value("batch_size", config.batch_size);
  config.peak_lr = j.value("peak_lr", config.peak_lr);
  config.weight_decay = j.value("weight_decay", config.weight_decay);
  config.warmup_frac = j.value("warmup_frac", config.warmup_frac);
  config.clip_norm = j.value("clip_norm", config.clip_norm);
  config.seed = j.value("seed", config.seed);
}

// ---- schedule and optimizer ---------------------------------------------------

double lr_at_step(std::int64_t step, std::int64_t total_steps, double peak,
                  double warmup_frac) {
  if (total_steps < 1 || step < 0 || step >= total_steps) return 0.0;
  // The tiny slack keeps exactly-representable products like 0.05 * 1000
  // from ceiling one step too far.
  auto warmup = std::int64_t(std::ceil(warmup_frac * double(total_steps) - 1e-9));
  warmup = std::clamp<std::int64_t>(warmup, 1, total_steps);
  if (step < warmup) return peak * double(step) / double(warmup);
  return peak * double(total_steps - step) / double(total_steps - warmup);
}

double clip_grad_norm(std::vector<TensorF>& grads, double max_norm) {
  double sq = 0.0;
  for (const TensorF& g : grads)
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const double x = double(g.data()[i]);
      sq += x * x;
    }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (TensorF& g : grads)
      for (std::int64_t i = 0; i < g.numel(); ++i)
        g.data()[i] = float(double(g.data()[i]) * scale);
  }
  return norm;
}

OptimizerState optimizer_init(const std::vector<TensorF>& params,
                              const TrainConfig& config) {
  OptimizerState state;
  state.weight_decay = config.weight_decay;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const TensorF& p : params) {
    state.m.emplace_back(p.shape());
    state.v.emplace_back(p.shape());
  }
  return state;
}

void adamw_step(std::vector<TensorF>& params, const std::vector<TensorF>& grads,
                OptimizerState& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ContractError("adamw_step: params, grads, and moments disagree in count");
  state.step += 1;
  const double t = double(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    TensorF& p = params[k];
    const TensorF& g = grads[k];
    if (p.shape() != g.shape())
      throw ContractError("adamw_step: gradient shape mismatch for parameter " +
                          std::to_string(k));
    TensorF& m = state.m[k];
    TensorF& v = state.v[k];
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const double gi = double(g.data()[i]);
      double pi = double(p.data()[i]);
      pi -= lr * state.weight_decay * pi;
      const double mi = state.beta1 * double(m.data()[i]) + (1.0 - state.beta1) * gi;
      const double vi =
          state.beta2 * double(v.data()[i]) + (1.0 - state.beta2) * gi * gi;
      m.data()[i] = float(mi);
      v.data()[i] = float(vi);
      pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + state.eps);
      p.data()[i] = float(pi);
    }
  }
}

// ---- evaluation ---------------------------------------------------------------

namespace {

TensorD softmax_rows(const TensorF& logits) {
  const std::int64_t n = logits.shape()[0], c = logits.shape()[1];
  TensorD probs(Shape{n, c});
  for (std::int64_t r = 0; r < n; ++r) {
    const float* row = logits.data() + r * c;
    double mx = double(row[0]);
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, double(row[j]));
    double lse = 0.0;
    for (std::int64_t j = 0; j < c; ++j) lse += std::exp(double(row[j]) - mx);
    for (std::int64_t j = 0; j < c; ++j)
      probs.data()[r * c + j] = std::exp(double(row[j]) - mx) / lse;
  }
  return probs;
}

void copy_rows(TensorD& dst, std::int64_t at, const TensorD& rows) {
  std::copy(rows.data(), rows.data() + rows.numel(),
            dst.data() + at * dst.shape()[1]);
}

}  // namespace

MetricsReport evaluate_model(const Model& model, Modality source,
                             const Shard& shard, int batch_size) {
  if (shard.examples.empty())
    throw ContractError("evaluate_model: shard is empty");
  if (batch_size < 1)
    throw ContractError("evaluate_model: batch_size must be >= 1");
  const DatasetConfig& dc = shard.config;
  const ViewParams eval_view = sample_view(0, ViewMode::kEval, dc);
  const std::int64_t n = std::int64_t(shard.examples.size());
  const bool dual = model.config.heads == HeadMode::kDual;

  TensorD action_probs, noun_probs, verb_probs;
  if (dual) {
    noun_probs = TensorD(Shape{n, model.config.num_nouns});
    verb_probs = TensorD(Shape{n, model.config.num_verbs});
  } else {
    action_probs = TensorD(Shape{n, model.config.num_actions()});
  }
  std::vector<std::int64_t> nouns, verbs;
  nouns.reserve(std::size_t(n));
  verbs.reserve(std::size_t(n));

  for (std::int64_t at = 0; at < n; at += batch_size) {
    const std::int64_t take = std::min<std::int64_t>(batch_size, n - at);
    std::vector<MultimodalExample> viewed;
    viewed.reserve(std::size_t(take));
    for (std::int64_t i = 0; i < take; ++i) {
      const MultimodalExample& ex = shard.examples[std::size_t(at + i)];
      viewed.push_back(apply_view(ex, eval_view));
      nouns.push_back(ex.noun);
      verbs.push_back(ex.verb);
    }
    const HeadLogits out = forward_logits(model, source, dc, viewed);
    if (dual) {
      copy_rows(noun_probs, at, softmax_rows(*out.noun));
      copy_rows(verb_probs, at, softmax_rows(*out.verb));
    } else {
      copy_rows(action_probs, at, softmax_rows(*out.action));
    }
  }
  if (dual) return dual_metrics(noun_probs, verb_probs, nouns, verbs);
  return action_metrics(action_probs, nouns, verbs, model.config.num_verbs);
}

// ---- training loops -----------------------------------------------------------

void to_json(nlohmann::json& j, const EpochRecord& record) {
  j = nlohmann::json{{"epoch", record.epoch},
                     {"step", record.step},
                     {"lr", record.lr},
                     {"train_loss", record.train_loss},
                     {"val", record.val}};
}

void from_json(const nlohmann::json& j, EpochRecord& record) {
  j.at("epoch").get_to(record.epoch);
  j.at("step").get_to(record.step);
  j.at("lr").get_to(record.lr);
  j.at("train_loss").get_to(record.train_loss);
  j.at("val").get_to(record.val);
}

std::uint64_t modality_draw_seed(std::uint64_t train_seed) {
  return derive_tag(train_seed, "modality-draw");
}

namespace {

// Everything the shared inner loop needs. The three public entry points only
// differ in model config, modality-per-batch policy, and loss assembly.
struct LoopSpec {
  ModelConfig model_config;
  Modality eval_source = Modality::kAppearance;
  int epoch_multiplier = 1;
  std::vector<Modality> batch_modalities;  // drawn uniformly; one entry = fixed
  // Teacher targets for one viewed batch, or nullopt when no teacher is
  // consulted (pure CE paths and the lambda = 0 endpoint).
  std::function<DistillTargets(const std::vector<MultimodalExample>&)> targets;
  DistillConfig distill;
};

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t key) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  CounterRng rng(key);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::size_t(rng.next_int(std::uint64_t(i)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

TrainResult run_loop(const LoopSpec& spec, const Splits& splits,
                     const TrainConfig& cfg, const StepObserver& observer) {
  validate(cfg);
  validate(spec.distill);
  if (splits.train.examples.empty())
    throw ContractError("training requires a non-empty train shard");
  const DatasetConfig& dc = splits.train.config;

  TrainResult result;
  result.model = model_init(spec.model_config, derive_tag(cfg.seed, "init"));
  Model& model = result.model;
  OptimizerState opt = optimizer_init(model.values, cfg);

  const std::int64_t n = std::int64_t(splits.train.examples.size());
  const std::int64_t spe = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_epochs = std::int64_t(cfg.epochs) * spec.epoch_multiplier;
  const std::int64_t total_steps = total_epochs * spe;

  const std::uint64_t shuffle_key = derive_tag(cfg.seed, "shuffle");
  const std::uint64_t view_key = derive_tag(cfg.seed, "views");
  CounterRng modality_rng(modality_draw_seed(cfg.seed));

  std::int64_t global_step = 0;
  for (std::int64_t epoch = 0; epoch < total_epochs; ++epoch) {
    const std::vector<std::size_t> order =
        shuffled_indices(std::size_t(n), derive_seed(shuffle_key, std::uint64_t(epoch)));
    double epoch_loss = 0.0;
    double last_lr = 0.0;

    for (std::int64_t at = 0; at < n; at += cfg.batch_size, ++global_step) {
      const std::int64_t take = std::min<std::int64_t>(cfg.batch_size, n - at);
      const Modality batch_modality =
          spec.batch_modalities[spec.batch_modalities.size() == 1
                                    ? 0
                                    : std::size_t(modality_rng.next_int(
                                          std::uint64_t(spec.batch_modalities.size())))];

      std::vector<std::size_t> batch_indices(order.begin() + at,
                                             order.begin() + at + take);
      const std::uint64_t step_key = derive_seed(view_key, std::uint64_t(global_step));
      std::vector<ViewParams> views;
      std::vector<MultimodalExample> viewed;
      views.reserve(batch_indices.size());
      viewed.reserve(batch_indices.size());
      for (std::size_t i = 0; i < batch_indices.size(); ++i) {
        views.push_back(
            sample_view(derive_seed(step_key, std::uint64_t(i)), ViewMode::kTrain, dc));
        viewed.push_back(
            apply_view(splits.train.examples[batch_indices[i]], views.back()));
      }
      const BatchLabels labels = labels_of(viewed);
      const DistillTargets targets =
          spec.targets ? spec.targets(viewed) : DistillTargets{};

      Tape<float> tape;
      const StagedModel staged = stage_model(tape, model);
      const ModelInput input =
          assemble_input(model.config, batch_modality, dc, viewed);
      const HeadValues out = forward(tape, staged, input);
      Value<float> loss = distill_loss(out, targets, labels, spec.distill);
      tape.backward(loss);

      const double lr = lr_at_step(global_step, total_steps, cfg.peak_lr,
                                   cfg.warmup_frac);
      last_lr = lr;
      const double loss_value = double(loss.val().item());
      epoch_loss += loss_value;
      if (observer) {
        StepInfo info;
        info.epoch = int(epoch);
        info.step = global_step;
        info.lr = lr;
        info.loss = loss_value;
        info.batch_modality = batch_modality;
        info.batch_indices = &batch_indices;
        info.views = &views;
        observer(info);
      }

      std::vector<TensorF> grads;
      grads.reserve(staged.leaves.size());
      for (const Value<float>& leaf : staged.leaves) grads.push_back(leaf.grad());
      clip_grad_norm(grads, cfg.clip_norm);
      adamw_step(model.values, grads, opt, lr);
    }

    EpochRecord record;
    record.epoch = int(epoch);
    record.step = global_step;
    record.lr = last_lr;
    record.train_loss = epoch_loss / double(spe);
    record.val = evaluate_model(model, spec.eval_source, splits.val, cfg.batch_size);
    result.log.push_back(std::move(record));
  }
  return result;
}

DistillConfig ce_only() {
  DistillConfig d;
  d.lambda = 0.0;
  return d;
}

}  // namespace

TrainResult train_teacher(Modality modality, HeadMode heads,
                          const Splits& splits, const TrainConfig& config,
                          const StepObserver& observer) {
  if (modality == Modality::kOmni)
    throw ContractError(
        "train_teacher trains one data modality; use train_omnivore for the "
        "joint model");
  LoopSpec spec;
  spec.model_config = model_config_for(modality, heads, splits.train.config);
  spec.eval_source = modality;
  spec.batch_modalities = {modality};
  spec.distill = ce_only();
  return run_loop(spec, splits, config, observer);
}

TrainResult train_omnivore(const std::vector<Modality>& modalities,
                           HeadMode heads, const Splits& splits,
                           const TrainConfig& config,
                           const StepObserver& observer) {
  if (modalities.empty())
    throw ContractError("train_omnivore needs at least one modality");
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    if (modalities[i] == Modality::kOmni)
      throw ContractError("train_omnivore draws from data modalities only");
    for (std::size_t j = i + 1; j < modalities.size(); ++j)
      if (modalities[i] == modalities[j])
        throw ContractError("train_omnivore: duplicate modality " +
                            to_string(modalities[i]));
  }
  LoopSpec spec;
  spec.model_config =
      model_config_for(Modality::kOmni, heads, splits.train.config);
  spec.eval_source = Modality::kAppearance;
  spec.epoch_multiplier = int(modalities.size());
  spec.batch_modalities = modalities;
  spec.distill = ce_only();
  return run_loop(spec, splits, config, observer);
}

TrainResult distill_student(const TeacherEnsemble& teacher,
                            const Splits& splits,
                            const DistillConfig& distill,
                            const TrainConfig& config,
                            const StepObserver& observer) {
  validate(distill);
  if (teacher.members.empty())
    throw ContractError("distill_student: teacher ensemble has no members");
  if (teacher.weights.size() != teacher.members.size())
    throw ContractError(
        "distill_student: teacher weights missing; run make_ensemble first");
  const HeadMode heads = teacher.members.front().config.heads;

  LoopSpec spec;
  spec.model_config =
      model_config_for(Modality::kAppearance, heads, splits.train.config);
  spec.eval_source = Modality::kAppearance;
  spec.batch_modalities = {Modality::kAppearance};
  spec.distill = distill;
  if (distill.lambda > 0.0) {
    const DatasetConfig& dc = splits.train.config;
    spec.targets = [&teacher, &dc](const std::vector<MultimodalExample>& viewed) {
      return ensemble_targets(teacher, dc, viewed);
    };
  }
  return run_loop(spec, splits, config, observer);
}

}  // namespace mmkd
