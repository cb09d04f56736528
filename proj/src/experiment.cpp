#include "mmkd/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mmkd/error.hpp"
#include "mmkd/io.hpp"
#include "mmkd/rng.hpp"
#include "mmkd/threadpool.hpp"

namespace mmkd {

namespace {

void reject_unknown_keys(const nlohmann::json& j,
                         const std::set<std::string>& allowed,
                         const std::string& where) {
  if (!j.is_object())
    throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
}

const std::set<std::string> kDatasetKeys = {
    "num_nouns",      "num_verbs",   "frames",
    "height",         "width",       "spectro_bins",
    "num_train",      "num_val",     "holdout_size",
    "appearance_bias_strength",      "spectro_noise",
    "split_mode",     "holdout_nouns", "view_frames",
    "seed"};
const std::set<std::string> kTrainKeys = {
    "epochs",      "batch_size", "peak_lr", "weight_decay",
    "warmup_frac", "clip_norm",  "seed"};
const std::set<std::string> kDistillKeys = {"tau", "lambda", "gamma",
                                            "holdout_size"};
// "sweep" is carried in the same file but consumed by sweep_from_json.
const std::set<std::string> kTopKeys = {"label",   "out_dir", "heads",
                                        "modalities", "dataset", "train",
                                        "distill", "sweep"};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

nlohmann::json read_json(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + " is not valid JSON: " + e.what());
  }
}

// Every command materializes its directory and drops the resolved config
// before doing anything else.
void open_run_dir(const std::filesystem::path& dir,
                  const ExperimentConfig& config) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_json(dir / "resolved_config.json", resolved_json(config));
}

}  // namespace

void validate(const ExperimentConfig& config) {
  if (config.label.empty() ||
      config.label.find('/') != std::string::npos ||
      config.label.find('\\') != std::string::npos)
    throw ConfigError("label must be a nonempty path-safe name, got \"" +
                      config.label + "\"");
  if (config.modalities.empty())
    throw ConfigError("modalities must not be empty");
  for (std::size_t i = 0; i < config.modalities.size(); ++i) {
    if (config.modalities[i] == Modality::kOmni)
      throw ConfigError(
          "the omnivorous tag is a model form, not a data modality");
    for (std::size_t k = i + 1; k < config.modalities.size(); ++k)
      if (config.modalities[i] == config.modalities[k])
        throw ConfigError("duplicate modality " +
                          to_string(config.modalities[i]));
  }
  validate(config.dataset);
  validate(config.train);
  validate(config.distill);
}

nlohmann::json resolved_json(const ExperimentConfig& config) {
  nlohmann::json mods = nlohmann::json::array();
  for (Modality m : config.modalities) mods.push_back(to_string(m));
  return nlohmann::json{{"label", config.label},
                        {"out_dir", config.out_dir.string()},
                        {"heads", to_string(config.heads)},
                        {"modalities", mods},
                        {"dataset", config.dataset},
                        {"train", config.train},
                        {"distill", config.distill}};
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, kTopKeys, "config");
  ExperimentConfig config;
  config.label = j.value("label", config.label);
  if (j.contains("out_dir"))
    config.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("heads"))
    config.heads = head_mode_from_string(j.at("heads").get<std::string>());
  if (j.contains("modalities")) {
    config.modalities.clear();
    for (const auto& name : j.at("modalities"))
      config.modalities.push_back(
          modality_from_string(name.get<std::string>()));
  }
  if (j.contains("dataset")) {
    reject_unknown_keys(j.at("dataset"), kDatasetKeys, "config.dataset");
    j.at("dataset").get_to(config.dataset);
  }
  if (j.contains("train")) {
    reject_unknown_keys(j.at("train"), kTrainKeys, "config.train");
    j.at("train").get_to(config.train);
  }
  if (j.contains("distill")) {
    reject_unknown_keys(j.at("distill"), kDistillKeys, "config.distill");
    j.at("distill").get_to(config.distill);
  }
  validate(config);
  return config;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
  try {
    return experiment_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_preset(ExperimentConfig& config, const std::string& name) {
  if (name == "weighted-blend") {
    config.distill.lambda = 0.8;
    config.distill.gamma = 1.0;
  } else if (name == "kl-uniform") {
    config.distill.lambda = 1.0;
    config.distill.gamma = 30.0;
  } else {
    throw ConfigError("unknown preset \"" + name +
                      "\"; available: weighted-blend, kl-uniform");
  }
}

// ---- run-directory layout -------------------------------------------------

std::filesystem::path data_dir(const ExperimentConfig& c) {
  return c.out_dir / "data";
}
std::filesystem::path teacher_dir(const ExperimentConfig& c, Modality m) {
  return c.out_dir / "teachers" / to_string(m);
}
std::filesystem::path baseline_dir(const ExperimentConfig& c) {
  return c.out_dir / "baseline";
}
std::filesystem::path omnivore_dir(const ExperimentConfig& c) {
  return c.out_dir / "omnivore";
}
std::filesystem::path weights_dir(const ExperimentConfig& c) {
  return c.out_dir / "weights";
}
std::filesystem::path student_dir(const ExperimentConfig& c) {
  return c.out_dir / "students" / c.label;
}
std::filesystem::path sweep_dir(const ExperimentConfig& c) {
  return c.out_dir / "sweep";
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                  bytes.size()));
}

// ---- gen-data ---------------------------------------------------------------

void cmd_gen_data(const ExperimentConfig& config, int threads) {
  validate(config);
  const std::filesystem::path dir = data_dir(config);
  open_run_dir(dir, config);

  const Splits splits = build_splits(config.dataset, threads);
  const struct {
    const char* name;
    const Shard* shard;
  } parts[] = {{"train.shard", &splits.train},
               {"holdout.shard", &splits.holdout},
               {"val.shard", &splits.val}};

  nlohmann::json files = nlohmann::json::object();
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& part : parts) {
    const std::filesystem::path path = dir / part.name;
    save_shard(path, *part.shard);
    files[part.name] = {{"bytes", std::filesystem::file_size(path)},
                        {"fnv1a64", hex64(file_checksum(path))}};
    counts[part.shard->split] = part.shard->examples.size();
  }

  write_json(dir / "manifest.json",
             nlohmann::json{{"schema", "mmkd-data-v1"},
                            {"dataset", config.dataset},
                            {"split_mode", to_string(config.dataset.split_mode)},
                            {"holdout_nouns", config.dataset.holdout_nouns},
                            {"holdout_size", config.dataset.holdout_size},
                            {"counts", counts},
                            {"files", files}});
}

Splits load_data(const ExperimentConfig& config) {
  const std::filesystem::path dir = data_dir(config);
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw IoError("no dataset under " + dir.string() +
                  "; run gen-data first");
  const nlohmann::json manifest = read_json(dir / "manifest.json");

  Splits splits;
  const struct {
    const char* name;
    Shard* shard;
  } parts[] = {{"train.shard", &splits.train},
               {"holdout.shard", &splits.holdout},
               {"val.shard", &splits.val}};
  for (const auto& part : parts) {
    const std::filesystem::path path = dir / part.name;
    const std::string want =
        manifest.at("files").at(part.name).at("fnv1a64").get<std::string>();
    if (hex64(file_checksum(path)) != want)
      throw IoError(path.string() + " does not match its manifest checksum");
    *part.shard = load_shard(path);
  }
  return splits;
}

// ---- trainers ---------------------------------------------------------------

namespace {

MetricsReport finish_run(const std::filesystem::path& dir,
                         const ExperimentConfig& config, TrainResult result,
                         Modality eval_source, nlohmann::json extra) {
  save_model(dir / "model.ckpt", result.model);

  std::ostringstream log;
  for (const EpochRecord& rec : result.log)
    log << nlohmann::json(rec).dump() << "\n";
  write_text(dir / "log.jsonl", log.str());

  MetricsReport final_report;
  if (!result.log.empty()) {
    final_report = result.log.back().val;
  } else {
    const Splits splits = load_data(config);
    final_report = evaluate_model(result.model, eval_source, splits.val,
                                  config.train.batch_size);
  }
  extra["final"] = final_report;
  extra["parameter_count"] = result.model.parameter_count();
  extra["seed"] = config.train.seed;
  extra["checkpoint"] = (dir / "model.ckpt").string();
  write_json(dir / "run.json", extra);
  return final_report;
}

Model load_member(const ExperimentConfig& config, Modality m) {
  const std::filesystem::path path = teacher_dir(config, m) / "model.ckpt";
  if (!std::filesystem::exists(path))
    throw IoError("no teacher checkpoint at " + path.string() +
                  "; run train-teacher --modality " + to_string(m));
  Model model = load_model(path);
  if (model.config.modality != m)
    throw ContractError(path.string() + " holds a " +
                        to_string(model.config.modality) +
                        " model, expected " + to_string(m));
  return model;
}

}  // namespace

MetricsReport cmd_train_teacher(const ExperimentConfig& config, Modality m) {
  validate(config);
  const std::filesystem::path dir = teacher_dir(config, m);
  open_run_dir(dir, config);
  const Splits splits = load_data(config);
  TrainResult result = train_teacher(m, config.heads, splits, config.train);
  return finish_run(dir, config, std::move(result), m,
                    nlohmann::json{{"kind", "teacher"},
                                   {"modality", to_string(m)}});
}

MetricsReport cmd_train_baseline(const ExperimentConfig& config) {
  validate(config);
  const std::filesystem::path dir = baseline_dir(config);
  open_run_dir(dir, config);
  const Splits splits = load_data(config);
  TrainResult result = train_teacher(Modality::kAppearance, config.heads,
                                     splits, config.train);
  return finish_run(dir, config, std::move(result), Modality::kAppearance,
                    nlohmann::json{{"kind", "baseline"}, {"objective", "ce"}});
}

MetricsReport cmd_train_omnivore(const ExperimentConfig& config) {
  validate(config);
  const std::filesystem::path dir = omnivore_dir(config);
  open_run_dir(dir, config);
  const Splits splits = load_data(config);
  TrainResult result =
      train_omnivore(config.modalities, config.heads, splits, config.train);
  nlohmann::json mods = nlohmann::json::array();
  for (Modality m : config.modalities) mods.push_back(to_string(m));
  return finish_run(
      dir, config, std::move(result), Modality::kAppearance,
      nlohmann::json{
          {"kind", "omnivore"},
          {"modalities", mods},
          {"epoch_multiplier", config.modalities.size()},
          {"modality_draw_seed", modality_draw_seed(config.train.seed)}});
}

// ---- weights & distillation ---------------------------------------------------

TeacherEnsemble cmd_estimate_weights(const ExperimentConfig& config) {
  validate(config);
  const std::filesystem::path dir = weights_dir(config);
  open_run_dir(dir, config);
  const Splits splits = load_data(config);

  std::vector<Model> members;
  for (Modality m : config.modalities)
    members.push_back(load_member(config, m));
  const TeacherEnsemble ensemble =
      make_ensemble(std::move(members), splits.holdout, config.distill.gamma);

  write_json(dir / "weights.json",
             teacher_weights_json(ensemble, config.distill.gamma,
                                  int(splits.holdout.examples.size()),
                                  config.dataset.seed));

  std::printf("%-12s %12s %12s\n", "modality", "holdout_ce", "weight");
  for (std::size_t i = 0; i < ensemble.members.size(); ++i)
    std::printf("%-12s %12.6f %12.6f\n",
                to_string(ensemble.members[i].config.modality).c_str(),
                ensemble.errors[i], ensemble.weights[i]);
  return ensemble;
}

MetricsReport cmd_distill(const ExperimentConfig& config) {
  validate(config);
  bool has_appearance = false;
  for (Modality m : config.modalities)
    has_appearance |= (m == Modality::kAppearance);
  if (!has_appearance)
    throw ConfigError(
        "student runs need the appearance modality in the teacher set");

  const std::filesystem::path dir = student_dir(config);
  open_run_dir(dir, config);
  const Splits splits = load_data(config);

  const std::filesystem::path weights_path = weights_dir(config) / "weights.json";
  if (!std::filesystem::exists(weights_path))
    throw IoError("no weights at " + weights_path.string() +
                  "; run estimate-weights first");
  const nlohmann::json weights = read_json(weights_path);
  const double file_gamma = weights.at("gamma").get<double>();
  if (std::abs(file_gamma - config.distill.gamma) > 1e-12)
    throw ContractError("weights.json was estimated at gamma " +
                        std::to_string(file_gamma) + " but the config asks " +
                        std::to_string(config.distill.gamma) +
                        "; re-run estimate-weights");

  TeacherEnsemble ensemble;
  std::vector<Modality> sorted = config.modalities;
  std::sort(sorted.begin(), sorted.end(),
            [](Modality a, Modality b) { return int(a) < int(b); });
  for (Modality m : sorted) {
    if (!weights.contains(to_string(m)))
      throw ContractError("weights.json has no entry for " + to_string(m) +
                          "; re-run estimate-weights with this teacher set");
    ensemble.members.push_back(load_member(config, m));
    ensemble.errors.push_back(
        weights.at(to_string(m)).at("error").get<double>());
    ensemble.weights.push_back(
        weights.at(to_string(m)).at("weight").get<double>());
  }

  TrainResult result =
      distill_student(ensemble, splits, config.distill, config.train);
  return finish_run(dir, config, std::move(result), Modality::kAppearance,
                    nlohmann::json{{"kind", "student"},
                                   {"lambda", config.distill.lambda},
                                   {"gamma", config.distill.gamma},
                                   {"weights_file", weights_path.string()}});
}

// ---- evaluation ---------------------------------------------------------------

namespace {

TensorD probs_of_logits(const TensorD& logits) {
  const std::int64_t c = logits.numel();
  TensorD probs(Shape{c});
  double mx = logits.data()[0];
  for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, logits.data()[j]);
  double lse = 0.0;
  for (std::int64_t j = 0; j < c; ++j)
    lse += std::exp(logits.data()[j] - mx);
  for (std::int64_t j = 0; j < c; ++j)
    probs.data()[j] = std::exp(logits.data()[j] - mx) / lse;
  return probs;
}

}  // namespace

MetricsReport cmd_evaluate(const ExperimentConfig& config,
                           const std::filesystem::path& checkpoint,
                           const std::string& split, int clips, int crops) {
  validate(config);
  const std::filesystem::path dir = config.out_dir / "eval" / config.label;
  open_run_dir(dir, config);

  const Splits splits = load_data(config);
  const Shard* shard = nullptr;
  if (split == "train")
    shard = &splits.train;
  else if (split == "holdout")
    shard = &splits.holdout;
  else if (split == "val")
    shard = &splits.val;
  else
    throw ConfigError("split must be train, holdout, or val; got \"" + split +
                      "\"");

  const Model model = load_model(checkpoint);
  const Modality source = model.config.modality == Modality::kOmni
                              ? Modality::kAppearance
                              : model.config.modality;

  MetricsReport report;
  if (clips == 1 && crops == 1) {
    report = evaluate_model(model, source, *shard, config.train.batch_size);
  } else {
    const std::int64_t n = std::int64_t(shard->examples.size());
    const bool dual = model.config.heads == HeadMode::kDual;
    TensorD action_probs, noun_probs, verb_probs;
    if (dual) {
      noun_probs = TensorD(Shape{n, model.config.num_nouns});
      verb_probs = TensorD(Shape{n, model.config.num_verbs});
    } else {
      action_probs = TensorD(Shape{n, model.config.num_actions()});
    }
    std::vector<std::int64_t> nouns, verbs;
    for (std::int64_t i = 0; i < n; ++i) {
      const MultimodalExample& ex = shard->examples[std::size_t(i)];
      nouns.push_back(ex.noun);
      verbs.push_back(ex.verb);
      const TtaLogits out =
          tta_forward(model, source, ex, shard->config, clips, crops);
      if (dual) {
        const TensorD np = probs_of_logits(*out.noun);
        const TensorD vp = probs_of_logits(*out.verb);
        std::copy(np.data(), np.data() + np.numel(),
                  noun_probs.data() + i * noun_probs.shape()[1]);
        std::copy(vp.data(), vp.data() + vp.numel(),
                  verb_probs.data() + i * verb_probs.shape()[1]);
      } else {
        const TensorD ap = probs_of_logits(*out.action);
        std::copy(ap.data(), ap.data() + ap.numel(),
                  action_probs.data() + i * action_probs.shape()[1]);
      }
    }
    report = dual ? dual_metrics(noun_probs, verb_probs, nouns, verbs)
                  : action_metrics(action_probs, nouns, verbs,
                                   model.config.num_verbs);
  }

  if (report.per_class.size() > 20) report.per_class.resize(20);
  nlohmann::json out = report;
  out["checkpoint"] = checkpoint.string();
  out["split"] = split;
  out["clips"] = clips;
  out["crops"] = crops;
  write_json(dir / "report.json", out);
  return report;
}

// ---- sweep ------------------------------------------------------------------

std::vector<SweepRow> default_sweep_rows() {
  return {{"ce", 0.0, std::nullopt}, {"kl", 1.0, 30.0},
          {"ce+kl", 0.8, 30.0},      {"ce+kl", 0.8, 3.0},
          {"kl", 1.0, 1.0},          {"ce+kl", 0.8, 1.0},
          {"ce+kl", 0.8, 0.33}};
}

namespace {

void validate_row(const SweepRow& row) {
  if (row.objective == "ce") {
    if (row.lambda != 0.0)
      throw ConfigError("objective \"ce\" means lambda 0, got " +
                        std::to_string(row.lambda));
    if (row.gamma)
      throw ConfigError("gamma is meaningless for the pure label objective");
  } else if (row.objective == "kl") {
    if (row.lambda != 1.0)
      throw ConfigError("objective \"kl\" means lambda 1, got " +
                        std::to_string(row.lambda));
  } else if (row.objective == "ce+kl") {
    if (!(row.lambda > 0.0 && row.lambda < 1.0))
      throw ConfigError("objective \"ce+kl\" needs lambda in (0,1), got " +
                        std::to_string(row.lambda));
  } else {
    throw ConfigError("objective must be ce, kl, or ce+kl; got \"" +
                      row.objective + "\"");
  }
  if (row.lambda > 0.0) {
    if (!row.gamma)
      throw ConfigError("rows with a distillation term need a gamma");
    if (!(*row.gamma > 0.0))
      throw ConfigError("gamma must be positive");
  }
}

std::string gvalue(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return std::string(buf);
}

// "ce", "kl-g30", "ce+kl-g0.33": unique per grid row, path-safe.
std::string row_slug(const SweepRow& row) {
  return row.gamma ? row.objective + "-g" + gvalue(*row.gamma)
                   : row.objective;
}

struct SeedOutcome {
  std::vector<MetricsReport> rows;       // aligned with spec.rows
  std::optional<MetricsReport> omnivore;
  // action_top1 at clips {1,2,4}, crops 1, for the distilled student and
  // the label-only baseline.
  std::vector<double> tta_student, tta_baseline;
};

MetricsReport tta_report(const Model& model, Modality source,
                         const Shard& shard, int clips, int crops) {
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
  for (std::int64_t i = 0; i < n; ++i) {
    const MultimodalExample& ex = shard.examples[std::size_t(i)];
    nouns.push_back(ex.noun);
    verbs.push_back(ex.verb);
    const TtaLogits out =
        tta_forward(model, source, ex, shard.config, clips, crops);
    if (dual) {
      const TensorD np = probs_of_logits(*out.noun);
      const TensorD vp = probs_of_logits(*out.verb);
      std::copy(np.data(), np.data() + np.numel(),
                noun_probs.data() + i * noun_probs.shape()[1]);
      std::copy(vp.data(), vp.data() + vp.numel(),
                verb_probs.data() + i * verb_probs.shape()[1]);
    } else {
      const TensorD ap = probs_of_logits(*out.action);
      std::copy(ap.data(), ap.data() + ap.numel(),
                action_probs.data() + i * action_probs.shape()[1]);
    }
  }
  return dual ? dual_metrics(noun_probs, verb_probs, nouns, verbs)
              : action_metrics(action_probs, nouns, verbs,
                               model.config.num_verbs);
}

// Index of the distilled-student row the soft checks track (prefer the
// uniform-ensemble pure-distillation row), and of the label-only row.
std::optional<std::size_t> find_kl_row(const std::vector<SweepRow>& rows) {
  std::optional<std::size_t> any;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].objective != "kl") continue;
    if (rows[i].gamma && *rows[i].gamma == 30.0) return i;
    if (!any) any = i;
  }
  return any;
}

std::optional<std::size_t> find_ce_row(const std::vector<SweepRow>& rows) {
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].objective == "ce") return i;
  return std::nullopt;
}

SeedOutcome run_sweep_seed(const ExperimentConfig& config,
                           const SweepSpec& spec, std::uint64_t seed) {
  ExperimentConfig base = config;
  base.dataset.seed = seed;
  base.train.seed = seed;
  base.out_dir = sweep_dir(config) / ("seed-" + std::to_string(seed));

  cmd_gen_data(base);
  const Splits splits = load_data(base);

  // Teachers once per seed; their holdout errors are shared by every row.
  std::vector<Model> members;
  for (Modality m : base.modalities) {
    const std::filesystem::path dir = teacher_dir(base, m);
    open_run_dir(dir, base);
    TrainResult result = train_teacher(m, base.heads, splits, base.train);
    members.push_back(result.model);
    finish_run(dir, base, std::move(result), m,
               nlohmann::json{{"kind", "teacher"}, {"modality", to_string(m)}});
  }
  TeacherEnsemble ensemble =
      make_ensemble(std::move(members), splits.holdout, 1.0);

  const auto kl_row = find_kl_row(spec.rows);
  const auto ce_row = find_ce_row(spec.rows);

  SeedOutcome outcome;
  std::optional<Model> kl_model, ce_model;
  for (std::size_t r = 0; r < spec.rows.size(); ++r) {
    const SweepRow& row = spec.rows[r];
    ExperimentConfig cell = base;
    cell.label = row_slug(row);
    cell.distill.lambda = row.lambda;
    cell.distill.gamma = row.gamma.value_or(1.0);

    if (row.gamma) {
      ensemble.weights = compute_teacher_weights(ensemble.errors, *row.gamma);
      std::error_code ec;
      std::filesystem::create_directories(weights_dir(cell), ec);
      write_json(weights_dir(cell) / ("weights-g" + gvalue(*row.gamma) +
                                      ".json"),
                 teacher_weights_json(ensemble, *row.gamma,
                                      int(splits.holdout.examples.size()),
                                      seed));
    } else {
      // Lambda 0 never consults the targets, but the loop requires a frozen
      // simplex; pin the uniform-temperature one.
      ensemble.weights = compute_teacher_weights(ensemble.errors, 1.0);
    }

    const std::filesystem::path dir = student_dir(cell);
    open_run_dir(dir, cell);
    TrainResult result =
        distill_student(ensemble, splits, cell.distill, cell.train);
    if (spec.with_tta && kl_row && r == *kl_row) kl_model = result.model;
    if (spec.with_tta && ce_row && r == *ce_row) ce_model = result.model;
    outcome.rows.push_back(finish_run(
        dir, cell, std::move(result), Modality::kAppearance,
        nlohmann::json{{"kind", "student"},
                       {"objective", row.objective},
                       {"lambda", row.lambda},
                       {"gamma", row.gamma ? nlohmann::json(*row.gamma)
                                           : nlohmann::json()}}));
  }

  if (spec.with_omnivore) {
    const std::filesystem::path dir = omnivore_dir(base);
    open_run_dir(dir, base);
    TrainResult result =
        train_omnivore(base.modalities, base.heads, splits, base.train);
    outcome.omnivore = finish_run(
        dir, base, std::move(result), Modality::kAppearance,
        nlohmann::json{{"kind", "omnivore"},
                       {"epoch_multiplier", base.modalities.size()},
                       {"modality_draw_seed",
                        modality_draw_seed(base.train.seed)}});
  }

  if (spec.with_tta && kl_model && ce_model) {
    for (int clips : {1, 2, 4}) {
      outcome.tta_student.push_back(
          tta_report(*kl_model, Modality::kAppearance, splits.val, clips, 1)
              .action_top1);
      outcome.tta_baseline.push_back(
          tta_report(*ce_model, Modality::kAppearance, splits.val, clips, 1)
              .action_top1);
    }
  }
  return outcome;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / double(xs.size());
}

double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / double(xs.size()));
}

nlohmann::json stat_json(const std::vector<double>& xs) {
  return nlohmann::json{
      {"mean", mean_of(xs)}, {"std", std_of(xs)}, {"per_seed", xs}};
}

std::vector<double> pluck(const std::vector<MetricsReport>& reports,
                          double MetricsReport::*field) {
  std::vector<double> xs;
  for (const MetricsReport& r : reports) xs.push_back(r.*field);
  return xs;
}

nlohmann::json report_stats(const std::vector<MetricsReport>& reports) {
  return nlohmann::json{
      {"noun_top1", stat_json(pluck(reports, &MetricsReport::noun_top1))},
      {"verb_top1", stat_json(pluck(reports, &MetricsReport::verb_top1))},
      {"action_top1", stat_json(pluck(reports, &MetricsReport::action_top1))},
      {"top1", stat_json(pluck(reports, &MetricsReport::top1))},
      {"top5", stat_json(pluck(reports, &MetricsReport::top5))},
      {"ece", stat_json(pluck(reports, &MetricsReport::ece))}};
}

// ---- plots (self-contained SVG, no dependencies) ----------------------------

std::string svg_header(int w, int h, const std::string& title) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
    << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n"
    << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" "
       "font-size=\"14\">"
    << title << "</text>\n";
  return s.str();
}

std::string fmt(double v, const char* spec = "%.4g") {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, v);
  return std::string(buf);
}

void plot_ablation(const std::filesystem::path& path,
                   const std::vector<SweepRow>& rows,
                   const nlohmann::json& summary_rows) {
  const int w = 720, h = 400, left = 60, right = 20, top = 40, bottom = 70;
  const int pw = w - left - right, ph = h - top - bottom;
  double hi = 0.0;
  std::vector<double> means, stds;
  for (const auto& r : summary_rows) {
    means.push_back(r.at("metrics").at("action_top1").at("mean").get<double>());
    stds.push_back(r.at("metrics").at("action_top1").at("std").get<double>());
    hi = std::max(hi, means.back() + stds.back());
  }
  hi = std::max(hi * 1.15, 1e-6);
  auto y_of = [&](double v) { return top + ph - int(v / hi * ph); };

  std::ostringstream s;
  s << svg_header(w, h, "action top-1 by objective");
  for (int g = 0; g <= 4; ++g) {
    const double v = hi * g / 4.0;
    s << "<line x1=\"" << left << "\" y1=\"" << y_of(v) << "\" x2=\""
      << left + pw << "\" y2=\"" << y_of(v)
      << "\" stroke=\"#ddd\"/>\n<text x=\"" << left - 6 << "\" y=\""
      << y_of(v) + 4 << "\" text-anchor=\"end\">" << fmt(v, "%.3f")
      << "</text>\n";
  }
  const int n = int(rows.size());
  const int band = pw / std::max(n, 1);
  for (int i = 0; i < n; ++i) {
    const int cx = left + band * i + band / 2;
    const int bw = std::max(band - 16, 8);
    const int yb = y_of(means[std::size_t(i)]);
    s << "<rect x=\"" << cx - bw / 2 << "\" y=\"" << yb << "\" width=\"" << bw
      << "\" height=\"" << top + ph - yb << "\" fill=\"#4878a8\"/>\n";
    const int ylo = y_of(std::max(means[std::size_t(i)] - stds[std::size_t(i)], 0.0));
    const int yhi = y_of(means[std::size_t(i)] + stds[std::size_t(i)]);
    s << "<line x1=\"" << cx << "\" y1=\"" << ylo << "\" x2=\"" << cx
      << "\" y2=\"" << yhi << "\" stroke=\"#333\"/>\n";
    s << "<text x=\"" << cx << "\" y=\"" << top + ph + 16
      << "\" text-anchor=\"middle\">" << row_slug(rows[std::size_t(i)])
      << "</text>\n";
  }
  s << "</svg>\n";
  write_text(path, s.str());
}

void plot_tta(const std::filesystem::path& path, const nlohmann::json& tta) {
  const int w = 560, h = 360, left = 60, right = 20, top = 40, bottom = 50;
  const int pw = w - left - right, ph = h - top - bottom;
  const std::vector<int> clips = tta.at("clips").get<std::vector<int>>();
  const auto series = [&](const char* key) {
    std::vector<double> m;
    for (const auto& v : tta.at(key).at("per_clip"))
      m.push_back(v.at("mean").get<double>());
    return m;
  };
  const std::vector<double> student = series("student");
  const std::vector<double> baseline = series("baseline");
  double lo = 1.0, hi = 0.0;
  for (double v : student) { lo = std::min(lo, v); hi = std::max(hi, v); }
  for (double v : baseline) { lo = std::min(lo, v); hi = std::max(hi, v); }
  const double pad = std::max((hi - lo) * 0.2, 0.01);
  lo = std::max(lo - pad, 0.0);
  hi = hi + pad;
  auto y_of = [&](double v) {
    return top + ph - int((v - lo) / (hi - lo) * ph);
  };
  auto x_of = [&](std::size_t i) {
    return left + int(double(i) / double(clips.size() - 1) * pw);
  };

  std::ostringstream s;
  s << svg_header(w, h, "action top-1 vs temporal clips");
  for (int g = 0; g <= 4; ++g) {
    const double v = lo + (hi - lo) * g / 4.0;
    s << "<line x1=\"" << left << "\" y1=\"" << y_of(v) << "\" x2=\""
      << left + pw << "\" y2=\"" << y_of(v)
      << "\" stroke=\"#ddd\"/>\n<text x=\"" << left - 6 << "\" y=\""
      << y_of(v) + 4 << "\" text-anchor=\"end\">" << fmt(v, "%.3f")
      << "</text>\n";
  }
  const struct {
    const std::vector<double>* data;
    const char* color;
    const char* name;
  } lines[] = {{&student, "#b0413e", "student"},
               {&baseline, "#4878a8", "baseline"}};
  for (const auto& line : lines) {
    std::ostringstream pts;
    for (std::size_t i = 0; i < line.data->size(); ++i)
      pts << x_of(i) << "," << y_of((*line.data)[i]) << " ";
    s << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\""
      << line.color << "\" stroke-width=\"2\"/>\n";
    for (std::size_t i = 0; i < line.data->size(); ++i)
      s << "<circle cx=\"" << x_of(i) << "\" cy=\"" << y_of((*line.data)[i])
        << "\" r=\"3\" fill=\"" << line.color << "\"/>\n";
  }
  for (std::size_t i = 0; i < clips.size(); ++i)
    s << "<text x=\"" << x_of(i) << "\" y=\"" << top + ph + 18
      << "\" text-anchor=\"middle\">" << clips[i] << "</text>\n";
  s << "<text x=\"" << left + pw - 4 << "\" y=\"" << top + 14
    << "\" text-anchor=\"end\" fill=\"#b0413e\">student</text>\n"
    << "<text x=\"" << left + pw - 4 << "\" y=\"" << top + 30
    << "\" text-anchor=\"end\" fill=\"#4878a8\">baseline</text>\n</svg>\n";
  write_text(path, s.str());
}

}  // namespace

SweepSpec sweep_from_json(const nlohmann::json& j) {
  reject_unknown_keys(
      j, {"rows", "seeds", "with_omnivore", "with_tta", "max_cells"}, "sweep");
  SweepSpec spec;
  if (j.contains("rows")) {
    spec.rows.clear();
    for (const auto& rj : j.at("rows")) {
      reject_unknown_keys(rj, {"objective", "lambda", "gamma"}, "sweep row");
      SweepRow row;
      row.objective = rj.at("objective").get<std::string>();
      row.lambda = rj.value("lambda", row.objective == "ce"    ? 0.0
                                      : row.objective == "kl" ? 1.0
                                                              : 0.8);
      if (rj.contains("gamma")) row.gamma = rj.at("gamma").get<double>();
      spec.rows.push_back(row);
    }
    if (spec.rows.empty()) throw ConfigError("sweep rows must not be empty");
  }
  for (const SweepRow& row : spec.rows) validate_row(row);
  if (j.contains("seeds")) {
    spec.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (spec.seeds.empty()) throw ConfigError("sweep seeds must not be empty");
    for (std::size_t i = 0; i < spec.seeds.size(); ++i)
      for (std::size_t k = i + 1; k < spec.seeds.size(); ++k)
        if (spec.seeds[i] == spec.seeds[k])
          throw ConfigError("duplicate sweep seed " +
                            std::to_string(spec.seeds[i]));
  }
  spec.with_omnivore = j.value("with_omnivore", spec.with_omnivore);
  spec.with_tta = j.value("with_tta", spec.with_tta);
  spec.max_cells = j.value("max_cells", spec.max_cells);
  if (spec.max_cells < 1) throw ConfigError("max_cells must be at least 1");
  return spec;
}

void cmd_sweep(const ExperimentConfig& config, const SweepSpec& spec,
               int threads) {
  validate(config);
  if (spec.rows.empty()) throw ConfigError("sweep rows must not be empty");
  for (const SweepRow& row : spec.rows) validate_row(row);

  std::vector<std::uint64_t> seeds = spec.seeds;
  if (seeds.empty())
    seeds = {config.train.seed, config.train.seed + 1, config.train.seed + 2};
  if (spec.rows.size() * seeds.size() > std::size_t(spec.max_cells))
    throw ConfigError(
        "sweep grid has " + std::to_string(spec.rows.size() * seeds.size()) +
        " cells, over the max_cells cap of " + std::to_string(spec.max_cells));

  const std::filesystem::path dir = sweep_dir(config);
  open_run_dir(dir, config);

  std::vector<SeedOutcome> outcomes(seeds.size());
  parallel_for(std::int64_t(seeds.size()), threads, [&](std::int64_t i) {
    outcomes[std::size_t(i)] = run_sweep_seed(config, spec, seeds[std::size_t(i)]);
  });

  // results.csv: one line per (row, seed) cell, rows grouped together.
  std::ostringstream csv;
  csv << "objective,lambda,gamma,seed,noun_top1,verb_top1,action_top1,"
         "top1,top5,ece,num_samples\n";
  for (std::size_t r = 0; r < spec.rows.size(); ++r) {
    const SweepRow& row = spec.rows[r];
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const MetricsReport& m = outcomes[s].rows[r];
      csv << row.objective << "," << gvalue(row.lambda) << ","
          << (row.gamma ? gvalue(*row.gamma) : "-") << "," << seeds[s] << ","
          << fmt(m.noun_top1, "%.6f") << "," << fmt(m.verb_top1, "%.6f")
          << "," << fmt(m.action_top1, "%.6f") << "," << fmt(m.top1, "%.6f")
          << "," << fmt(m.top5, "%.6f") << "," << fmt(m.ece, "%.6f") << ","
          << m.num_samples << "\n";
    }
  }
  write_text(dir / "results.csv", csv.str());

  nlohmann::json summary_rows = nlohmann::json::array();
  for (std::size_t r = 0; r < spec.rows.size(); ++r) {
    std::vector<MetricsReport> per_seed;
    for (const SeedOutcome& o : outcomes) per_seed.push_back(o.rows[r]);
    summary_rows.push_back(nlohmann::json{
        {"objective", spec.rows[r].objective},
        {"lambda", spec.rows[r].lambda},
        {"gamma", spec.rows[r].gamma ? nlohmann::json(*spec.rows[r].gamma)
                                     : nlohmann::json()},
        {"metrics", report_stats(per_seed)}});
  }

  nlohmann::json summary{{"label", config.label},
                         {"seeds", seeds},
                         {"rows", summary_rows}};

  if (spec.with_omnivore) {
    std::vector<MetricsReport> per_seed;
    for (const SeedOutcome& o : outcomes) per_seed.push_back(*o.omnivore);
    summary["omnivore"] = report_stats(per_seed);
  } else {
    summary["omnivore"] = nullptr;
  }

  const auto kl_row = find_kl_row(spec.rows);
  const auto ce_row = find_ce_row(spec.rows);

  const bool ran_tta = spec.with_tta && kl_row && ce_row;
  if (ran_tta) {
    nlohmann::json tta{{"clips", {1, 2, 4}}};
    for (const char* who : {"student", "baseline"}) {
      nlohmann::json per_clip = nlohmann::json::array();
      for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> xs;
        for (const SeedOutcome& o : outcomes)
          xs.push_back(who == std::string("student") ? o.tta_student[c]
                                                     : o.tta_baseline[c]);
        per_clip.push_back(stat_json(xs));
      }
      tta[who] = {{"per_clip", per_clip}};
    }
    summary["tta"] = tta;
  } else {
    summary["tta"] = nullptr;
  }

  // Directional checks, reported rather than enforced: dropping test-time
  // clips should hurt the student no more than the baseline (within half a
  // point), and the student should match or beat joint multimodal training.
  nlohmann::json checks = nlohmann::json::object();
  if (ran_tta) {
    auto drop = [&](const std::vector<std::vector<double>*>& series) {
      std::vector<double> d;
      for (const auto* s : series) d.push_back((*s)[2] - (*s)[0]);
      return mean_of(d);
    };
    std::vector<std::vector<double>*> st, bl;
    for (SeedOutcome& o : outcomes) {
      st.push_back(&o.tta_student);
      bl.push_back(&o.tta_baseline);
    }
    const double student_drop = drop(st), baseline_drop = drop(bl);
    checks["tta_degradation"] = {
        {"status",
         student_drop - baseline_drop <= 0.005 + 1e-12 ? "pass" : "warn"},
        {"student_gain_4_vs_1", student_drop},
        {"baseline_gain_4_vs_1", baseline_drop},
        {"margin", 0.005}};
  } else {
    checks["tta_degradation"] = {{"status", "skipped"}};
  }
  if (spec.with_omnivore && kl_row) {
    std::vector<double> st, om;
    for (const SeedOutcome& o : outcomes) {
      st.push_back(o.rows[*kl_row].action_top1);
      om.push_back(o.omnivore->action_top1);
    }
    const double s_mean = mean_of(st), o_mean = mean_of(om);
    checks["omnivore_comparison"] = {
        {"status", s_mean >= o_mean - 1e-12 ? "pass" : "warn"},
        {"student_action_top1", s_mean},
        {"omnivore_action_top1", o_mean}};
  } else {
    checks["omnivore_comparison"] = {{"status", "skipped"}};
  }
  summary["checks"] = checks;

  write_json(dir / "summary.json", summary);

  std::error_code ec;
  std::filesystem::create_directories(dir / "plots", ec);
  plot_ablation(dir / "plots" / "objective-ablation.svg", spec.rows,
                summary_rows);
  if (ran_tta) plot_tta(dir / "plots" / "tta-degradation.svg", summary["tta"]);
}

// ---- report -------------------------------------------------------------------

std::string cmd_report(const ExperimentConfig& config) {
  const std::filesystem::path summary_path = sweep_dir(config) / "summary.json";
  if (!std::filesystem::exists(summary_path))
    throw IoError("no sweep summary at " + summary_path.string() +
                  "; run sweep first");
  const nlohmann::json summary = read_json(summary_path);

  std::ostringstream md;
  md << "# Objective ablation: " << summary.at("label").get<std::string>()
     << "\n\nSeeds:";
  for (const auto& s : summary.at("seeds")) md << " " << s;
  md << "\n\n## Students\n\n"
     << "| objective | lambda | gamma | action top-1 | top-1 | top-5 | ECE "
        "|\n"
     << "|---|---|---|---|---|---|---|\n";
  auto cell = [](const nlohmann::json& stat) {
    return fmt(stat.at("mean").get<double>(), "%.4f") + " ± " +
           fmt(stat.at("std").get<double>(), "%.4f");
  };
  for (const auto& row : summary.at("rows")) {
    const auto& m = row.at("metrics");
    md << "| " << row.at("objective").get<std::string>() << " | "
       << gvalue(row.at("lambda").get<double>()) << " | "
       << (row.at("gamma").is_null() ? std::string("-")
                                     : gvalue(row.at("gamma").get<double>()))
       << " | " << cell(m.at("action_top1")) << " | " << cell(m.at("top1"))
       << " | " << cell(m.at("top5")) << " | " << cell(m.at("ece"))
       << " |\n";
  }

  if (!summary.at("omnivore").is_null()) {
    const auto& m = summary.at("omnivore");
    md << "\n## Joint multimodal training\n\n"
       << "| action top-1 | top-1 | top-5 | ECE |\n|---|---|---|---|\n| "
       << cell(m.at("action_top1")) << " | " << cell(m.at("top1")) << " | "
       << cell(m.at("top5")) << " | " << cell(m.at("ece")) << " |\n";
  }

  if (!summary.at("tta").is_null()) {
    const auto& tta = summary.at("tta");
    md << "\n## Test-time augmentation\n\n| clips | student action top-1 | "
          "baseline action top-1 |\n|---|---|---|\n";
    const auto& clips = tta.at("clips");
    for (std::size_t i = 0; i < clips.size(); ++i)
      md << "| " << clips[i].get<int>() << " | "
         << cell(tta.at("student").at("per_clip")[i]) << " | "
         << cell(tta.at("baseline").at("per_clip")[i]) << " |\n";
  }

  md << "\n## Checks\n\n";
  for (const auto& [name, check] : summary.at("checks").items()) {
    const std::string status = check.at("status").get<std::string>();
    md << "- **" << name << "**: "
       << (status == "pass" ? "PASS" : status == "warn" ? "WARN" : "SKIPPED");
    if (name == "tta_degradation" && status != "skipped")
      md << " (student 4->1 clip gain "
         << fmt(check.at("student_gain_4_vs_1").get<double>(), "%+.4f")
         << ", baseline "
         << fmt(check.at("baseline_gain_4_vs_1").get<double>(), "%+.4f")
         << ")";
    if (name == "omnivore_comparison" && status != "skipped")
      md << " (student "
         << fmt(check.at("student_action_top1").get<double>(), "%.4f")
         << " vs omnivore "
         << fmt(check.at("omnivore_action_top1").get<double>(), "%.4f")
         << ")";
    md << "\n";
  }

  const std::filesystem::path dir = config.out_dir / "report";
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const std::string text = md.str();
  write_text(dir / "report.md", text);
  return text;
}

}  // namespace mmkd
