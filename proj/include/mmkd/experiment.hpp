#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmkd/dataset.hpp"
#include "mmkd/distill.hpp"
#include "mmkd/metrics.hpp"
#include "mmkd/training.hpp"

namespace mmkd {

// Experiment orchestration behind the command-line front end. Every command
// is an ordinary function here, so the test suite drives the same code the
// binary does. Each command materializes its run directory and writes the
// fully-resolved config JSON into it before any real work starts; outputs of
// one command (shards, checkpoints, weight files) are the file inputs of the
// next, tied together by an fnv1a-checksummed manifest.

struct ExperimentConfig {
  std::string label = "run";
  std::filesystem::path out_dir = "mmkd-out";
  HeadMode heads = HeadMode::kDual;
  std::vector<Modality> modalities = data_modalities();  // teacher set
  DatasetConfig dataset;
  TrainConfig train;
  DistillConfig distill;
};

void validate(const ExperimentConfig& config);

// All defaults materialized; parsing is strict (an unknown key anywhere is a
// config error) but sparse, so files only name what they change.
nlohmann::json resolved_json(const ExperimentConfig& config);
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Named distillation settings: "weighted-blend" mixes the label loss with an
// error-weighted ensemble (lambda 0.8, gamma 1.0); "kl-uniform" trains on
// the distillation loss alone over an effectively uniform ensemble
// (lambda 1.0, gamma 30.0).
void apply_preset(ExperimentConfig& config, const std::string& name);

// ---- run-directory layout -------------------------------------------------

std::filesystem::path data_dir(const ExperimentConfig& config);
std::filesystem::path teacher_dir(const ExperimentConfig& config, Modality m);
std::filesystem::path baseline_dir(const ExperimentConfig& config);
std::filesystem::path omnivore_dir(const ExperimentConfig& config);
std::filesystem::path weights_dir(const ExperimentConfig& config);
std::filesystem::path student_dir(const ExperimentConfig& config);
std::filesystem::path sweep_dir(const ExperimentConfig& config);

std::uint64_t file_checksum(const std::filesystem::path& path);

// ---- commands ---------------------------------------------------------------

// Writes train/holdout/val shards plus manifest.json (per-file checksums,
// resolved dataset config, split metadata). Generation parallelizes per
// example without changing output bytes.
void cmd_gen_data(const ExperimentConfig& config, int threads = 1);

// Loads the generated shards, verifying them against the manifest.
Splits load_data(const ExperimentConfig& config);

// Each trainer leaves model.ckpt, log.jsonl, and run.json (final metrics,
// parameter count, reproducibility seeds) in its run directory.
MetricsReport cmd_train_teacher(const ExperimentConfig& config, Modality m);
MetricsReport cmd_train_baseline(const ExperimentConfig& config);
MetricsReport cmd_train_omnivore(const ExperimentConfig& config);

// Estimates per-teacher holdout errors from the serialized checkpoints and
// writes weights.json for the config's gamma; returns the ensemble.
TeacherEnsemble cmd_estimate_weights(const ExperimentConfig& config);

// Trains the student against the weights file and returns its final report.
MetricsReport cmd_distill(const ExperimentConfig& config);

// Evaluates a checkpoint on one split with n temporal clips x m spatial
// crops (1 x 1 reproduces the training-time eval numbers exactly).
MetricsReport cmd_evaluate(const ExperimentConfig& config,
                           const std::filesystem::path& checkpoint,
                           const std::string& split, int clips, int crops);

// ---- sweep ------------------------------------------------------------------

// One objective configuration; gamma is absent for the pure-label row.
struct SweepRow {
  std::string objective;  // "ce", "kl", or "ce+kl"
  double lambda = 0.0;
  std::optional<double> gamma;
};

// The default grid is the seven-row objective ablation: the label-only
// baseline, distillation-only at uniform ensemble weights, and the blended
// loss across ensemble temperatures.
std::vector<SweepRow> default_sweep_rows();

struct SweepSpec {
  std::vector<SweepRow> rows = default_sweep_rows();
  std::vector<std::uint64_t> seeds;  // defaults to {seed, seed+1, seed+2}
  bool with_omnivore = true;         // joint-training comparison column
  bool with_tta = true;              // clips {1,2,4} degradation study
  int max_cells = 60;                // rows x seeds cap
};

SweepSpec sweep_from_json(const nlohmann::json& j);

// Runs every (row, seed) cell: per seed it generates data, trains the
// teacher set once, then trains one student per row; writes results.csv,
// summary.json, and plots/*.svg under sweep_dir. Seeds run in parallel when
// threads > 1; outputs are byte-identical either way.
void cmd_sweep(const ExperimentConfig& config, const SweepSpec& spec,
               int threads = 1);

// Renders the sweep outputs into report.md (tables plus the pass/warn
// directional checks) and returns the rendered text.
std::string cmd_report(const ExperimentConfig& config);

}  // namespace mmkd
