#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmkd/checkpoint.hpp"
#include "mmkd/dataset.hpp"
#include "mmkd/tape.hpp"

namespace mmkd {

// Modality encoders and classification heads. Two encoder families share the
// same head structure:
//
//   grid   frames-as-images: three 3x3 stride-2 conv+ReLU blocks (channels
//          16 -> 32 -> 64) applied per frame, spatial mean, mean over frames,
//          then a 64 -> 128 dense + ReLU trunk feature
//   boxes  layout-native: each box embeds (4 normalized coords + category
//          one-hot) -> 32 + ReLU, boxes mean-pool into a frame vector which a
//          32 -> 64 dense + ReLU refines, frames mean-pool and feed the same
//          64 -> 128 trunk
//
// On top of the 128-d trunk sits either one action head or separate noun and
// verb heads. Models emit raw logits; softmax belongs to the caller. The
// omnivorous variant is a single 3-channel grid model that every modality is
// converted into image form for: flow zero-padded to 3 channels, layout
// rasterized, spectrograms upsampled and replicated.

enum class Modality { kAppearance, kFlow, kLayout, kSpectro, kOmni };
std::string to_string(Modality modality);
Modality modality_from_string(const std::string& name);

// The four data-bearing modalities, in canonical order (kOmni is a model
// variant, not a data stream, and is deliberately absent).
const std::vector<Modality>& data_modalities();

enum class HeadMode { kSingle, kDual };
std::string to_string(HeadMode mode);
HeadMode head_mode_from_string(const std::string& name);

enum class EncoderKind { kGrid, kBoxes };

struct ModelConfig {
  Modality modality = Modality::kAppearance;
  EncoderKind encoder = EncoderKind::kGrid;
  HeadMode heads = HeadMode::kSingle;
  int num_nouns = 6;
  int num_verbs = 4;
  int in_channels = 3;     // grid encoders only
  int input_size = 32;     // grid spatial side (spectro: frequency bins)
  int box_categories = 7;  // boxes encoder: hand + one per noun
  int num_actions() const { return num_nouns * num_verbs; }
  int box_feature_dim() const { return 4 + box_categories; }
};

void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

// Canonical configuration for a modality under a dataset: picks the encoder
// family, channel count, and input size. kLayout maps to the boxes encoder;
// kOmni to a 3-channel grid over the full canvas.
ModelConfig model_config_for(Modality modality, HeadMode heads,
                             const DatasetConfig& data);

// Named parameter tensors in a fixed order (the checkpoint and optimizer
// order). Immutable during inference; training is single-writer.
struct Model {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<TensorF> values;

  TensorF& param(const std::string& name);
  const TensorF& param(const std::string& name) const;
  std::int64_t parameter_count() const;
};

// Weights uniform in (-sqrt(1/fan_in), sqrt(1/fan_in)), biases zero. Each
// tensor draws from its own name-derived stream, so the same seed always
// produces bit-identical parameters.
Model model_init(const ModelConfig& config, std::uint64_t seed);

Checkpoint to_checkpoint(const Model& model);
Model model_from_checkpoint(const Checkpoint& checkpoint);
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

// ---- forward ----------------------------------------------------------------

// A model's parameters registered as leaves on a tape; leaves[i] pairs with
// model.values[i], which is where the optimizer finds each gradient.
struct StagedModel {
  const Model* model = nullptr;
  std::vector<Value<float>> leaves;
};

StagedModel stage_model(Tape<float>& tape, const Model& model);

// One batch in the model's native input form, assembled outside the tape.
struct ModelInput {
  int batch_size = 0;
  int frames_per_example = 0;
  TensorF frames;      // grid: [B*F, C, H, W]
  TensorF box_feats;   // boxes: [total boxes, box_feature_dim]
  TensorF frame_pool;  // boxes: [B*F, total boxes] per-frame averaging map
};

// Converts view-transformed examples into the model's input tensor. The
// source tag says which modality the examples should be read through; a
// non-omnivorous model insists on its own modality and raises a contract
// error otherwise.
ModelInput assemble_input(const ModelConfig& config, Modality source,
                          const DatasetConfig& data,
                          const std::vector<MultimodalExample>& viewed);

// Raw logits for one batch; dual-head models fill noun and verb, single-head
// models fill action.
struct HeadValues {
  std::optional<Value<float>> action;
  std::optional<Value<float>> noun;
  std::optional<Value<float>> verb;
};

HeadValues forward(Tape<float>& tape, const StagedModel& staged,
                   const ModelInput& input);

// Tape-free inference: stage on a scratch tape, no gradients retained.
struct HeadLogits {
  std::optional<TensorF> action;
  std::optional<TensorF> noun;
  std::optional<TensorF> verb;
};

HeadLogits forward_logits(const Model& model, Modality source,
                          const DatasetConfig& data,
                          const std::vector<MultimodalExample>& viewed);

// ---- test-time augmentation ---------------------------------------------------

// Start frames covering [0, T - window] uniformly; clips == 1 yields the
// centered evaluation window.
std::vector<int> tta_temporal_starts(int total_frames, int window, int clips);

// Logits averaged in double precision over temporal_clips windows x
// spatial_crops crops (1 = full frame; 3 = left/center/right thirds), no
// flipping. temporal_clips must not exceed the number of distinct starts and
// spatial_crops must be 1 or 3.
struct TtaLogits {
  std::optional<TensorD> action;
  std::optional<TensorD> noun;
  std::optional<TensorD> verb;
};

TtaLogits tta_forward(const Model& model, Modality source,
                      const MultimodalExample& example,
                      const DatasetConfig& data, int temporal_clips,
                      int spatial_crops);

}  // namespace mmkd
