#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mmkd/error.hpp"
#include "mmkd/experiment.hpp"

namespace {

// Stable machine-readable failure shape on stderr; humans get the message,
// scripts get the type.
int fail(const char* type, const std::string& message) {
  const nlohmann::json j{{"error", {{"type", type}, {"message", message}}}};
  std::fprintf(stderr, "%s\n", j.dump().c_str());
  return 1;
}

void print_report(const char* command, const mmkd::MetricsReport& report) {
  nlohmann::json j = report;
  j["command"] = command;
  std::printf("%s\n", j.dump(2).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Synthetic multimodal action recognition: teachers, ensemble "
      "distillation, and evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir_flag;
  std::uint64_t seed_flag = 0;
  bool seed_given = false;
  int threads = 1;
  app.add_option("--config", config_path,
                 "JSON experiment config; flags override it")
      ->check(CLI::ExistingFile);
  app.add_option("--out-dir", out_dir_flag,
                 "run directory root (else config file, else $MMKD_OUT_DIR)");
  app.add_option("--seed", seed_flag, "training seed")
      ->each([&](const std::string&) { seed_given = true; });
  app.add_option("--threads", threads, "worker threads where supported")
      ->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-data", "generate the dataset shards");

  auto* teach =
      app.add_subcommand("train-teacher", "train one single-modality teacher");
  std::string modality_name;
  teach->add_option("--modality", modality_name,
                    "appearance | flow | layout | spectro")
      ->required();

  auto* base = app.add_subcommand(
      "train-baseline", "train the label-only appearance model");

  auto* omni = app.add_subcommand(
      "train-omnivore", "train one model over all modalities jointly");

  auto* weights = app.add_subcommand(
      "estimate-weights", "holdout-error ensemble weights for the teachers");
  double gamma_flag = 0.0;
  bool gamma_given = false;
  weights->add_option("--gamma", gamma_flag, "weighting temperature")
      ->each([&](const std::string&) { gamma_given = true; });

  auto* distill = app.add_subcommand(
      "distill", "train the appearance student against the teacher ensemble");
  std::string preset;
  double lambda_flag = 0.0;
  bool lambda_given = false;
  double distill_gamma_flag = 0.0;
  bool distill_gamma_given = false;
  distill->add_option("--preset", preset, "weighted-blend | kl-uniform");
  distill->add_option("--lambda", lambda_flag, "distillation loss share")
      ->each([&](const std::string&) { lambda_given = true; });
  distill->add_option("--gamma", distill_gamma_flag, "weighting temperature")
      ->each([&](const std::string&) { distill_gamma_given = true; });

  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on a split");
  std::string checkpoint;
  std::string split = "val";
  int clips = 1, crops = 1;
  eval->add_option("--checkpoint", checkpoint,
                   "model file (default: this label's student)");
  eval->add_option("--split", split, "train | holdout | val");
  eval->add_option("--clips", clips, "temporal clips averaged at test time")
      ->check(CLI::PositiveNumber);
  eval->add_option("--crops", crops, "spatial crops averaged at test time")
      ->check(CLI::PositiveNumber);

  auto* sweep = app.add_subcommand(
      "sweep", "run the objective grid across seeds and summarize");
  std::vector<std::uint64_t> seeds_flag;
  bool no_omnivore = false, no_tta = false, parallel = false;
  sweep->add_option("--seeds", seeds_flag, "comma-separated seed list")
      ->delimiter(',');
  sweep->add_flag("--no-omnivore", no_omnivore,
                  "skip the joint-training comparison");
  sweep->add_flag("--no-tta", no_tta, "skip the clip-degradation study");
  sweep->add_flag("--parallel", parallel, "run seeds on --threads workers");

  auto* report = app.add_subcommand(
      "report", "render sweep results into markdown");

  // Global flags read naturally in either position:
  //   mmkd --threads 2 gen-data  /  mmkd gen-data --threads 2
  for (CLI::App* sub : app.get_subcommands(nullptr)) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    mmkd::ExperimentConfig config;
    nlohmann::json config_json = nlohmann::json::object();
    if (!config_path.empty()) {
      config = mmkd::load_experiment_config(config_path);
      const auto bytes = mmkd::io::read_file(config_path);
      config_json = nlohmann::json::parse(bytes.begin(), bytes.end());
    }
    if (!out_dir_flag.empty()) {
      config.out_dir = out_dir_flag;
    } else if (!config_json.contains("out_dir")) {
      if (const char* env = std::getenv("MMKD_OUT_DIR")) config.out_dir = env;
    }
    if (seed_given) config.train.seed = seed_flag;

    if (*gen) {
      mmkd::cmd_gen_data(config, threads);
      std::printf("%s\n",
                  nlohmann::json{{"command", "gen-data"},
                                 {"dir", mmkd::data_dir(config).string()}}
                      .dump(2)
                      .c_str());
    } else if (*teach) {
      const mmkd::Modality m = mmkd::modality_from_string(modality_name);
      print_report("train-teacher", mmkd::cmd_train_teacher(config, m));
    } else if (*base) {
      print_report("train-baseline", mmkd::cmd_train_baseline(config));
    } else if (*omni) {
      print_report("train-omnivore", mmkd::cmd_train_omnivore(config));
    } else if (*weights) {
      if (gamma_given) config.distill.gamma = gamma_flag;
      mmkd::cmd_estimate_weights(config);
    } else if (*distill) {
      if (!preset.empty()) mmkd::apply_preset(config, preset);
      if (lambda_given) config.distill.lambda = lambda_flag;
      if (distill_gamma_given) config.distill.gamma = distill_gamma_flag;
      print_report("distill", mmkd::cmd_distill(config));
    } else if (*eval) {
      const std::filesystem::path ckpt =
          checkpoint.empty() ? mmkd::student_dir(config) / "model.ckpt"
                             : std::filesystem::path(checkpoint);
      print_report("evaluate",
                   mmkd::cmd_evaluate(config, ckpt, split, clips, crops));
    } else if (*sweep) {
      mmkd::SweepSpec spec;
      if (config_json.contains("sweep"))
        spec = mmkd::sweep_from_json(config_json.at("sweep"));
      if (!seeds_flag.empty()) spec.seeds = seeds_flag;
      if (no_omnivore) spec.with_omnivore = false;
      if (no_tta) spec.with_tta = false;
      mmkd::cmd_sweep(config, spec, parallel ? threads : 1);
      std::printf("%s\n",
                  nlohmann::json{{"command", "sweep"},
                                 {"dir", mmkd::sweep_dir(config).string()}}
                      .dump(2)
                      .c_str());
    } else if (*report) {
      std::printf("%s", mmkd::cmd_report(config).c_str());
    }
  } catch (const mmkd::ConfigError& e) {
    return fail("ConfigError", e.what());
  } catch (const mmkd::ContractError& e) {
    return fail("ContractError", e.what());
  } catch (const mmkd::IoError& e) {
    return fail("IoError", e.what());
  } catch (const mmkd::Error& e) {
    return fail("Error", e.what());
  } catch (const std::exception& e) {
    return fail("InternalError", e.what());
  }
  return 0;
}
