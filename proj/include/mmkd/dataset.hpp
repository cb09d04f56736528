#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmkd/tensor.hpp"

namespace mmkd {

// Synthetic multimodal action clips ("shape-actions"). Each example shows a
// textured background, a hand-like distractor box, and one active object of
// a noun class executing a verb's motion program. Four modalities are
// rendered from the same underlying scene:
//
//   appearance [T,3,H,W]  RGB in [0,1]; the only modality that can see the
//                         noun-correlated background texture (the train-side
//                         shortcut)
//   flow       [T,2,H,W]  analytic x/y velocity in pixels/frame; exact
//                         inside each box, zero elsewhere, zero at frame T-1
//   layout     per frame  boxes (x,y,w,h, category); category 0 is the hand,
//                         1..num_nouns the object classes
//   spectro    [T,1,F,F]  per-verb frequency band patterns plus seeded noise
//
// Everything is a pure function of (seed, config), so generation is
// reproducible byte-for-byte and parallelizable per example.

enum class SplitMode { kIid, kCompositional };

std::string to_string(SplitMode mode);
SplitMode split_mode_from_string(const std::string& s);

struct DatasetConfig {
  int num_nouns = 6;
  int num_verbs = 4;
  int frames = 12;        // T
  int height = 32;
  int width = 32;
  int spectro_bins = 16;  // F
  int num_train = 1280;
  int num_val = 512;
  int holdout_size = 256;  // Z, carved out of the training pool
  double appearance_bias_strength = 0.9;
  double spectro_noise = 0.05;
  SplitMode split_mode = SplitMode::kCompositional;
  std::vector<int> holdout_nouns;  // optional noun-level holdout (compositional)
  int view_frames = 8;             // T', frames per sampled window
  std::uint64_t seed = 17;
};

void validate(const DatasetConfig& config);
void to_json(nlohmann::json& j, const DatasetConfig& config);
void from_json(const nlohmann::json& j, DatasetConfig& config);

struct LayoutBox {
  float x = 0, y = 0, w = 0, h = 0;
  std::uint8_t category = 0;
};

struct MultimodalExample {
  std::uint64_t id = 0;
  int noun = 0;
  int verb = 0;
  int action = 0;  // noun * num_verbs + verb
  TensorF appearance;
  TensorF flow;
  std::vector<std::vector<LayoutBox>> layout;  // [T][boxes in frame]
  TensorF spectro;
};

// Deterministic in (example_seed, config, train_side); train_side controls
// whether the noun-keyed background texture may appear.
MultimodalExample generate_example(std::uint64_t example_seed,
                                   const DatasetConfig& config,
                                   bool train_side);

struct Shard {
  DatasetConfig config;
  std::string split;  // "train" | "holdout" | "val"
  std::vector<MultimodalExample> examples;
};

struct Splits {
  Shard train;
  Shard holdout;  // teacher-weight estimation only, never trained on
  Shard val;
};

Splits build_splits(const DatasetConfig& config, int threads = 1);

// ---- views ------------------------------------------------------------------

enum class ViewMode { kTrain, kEval };

struct ViewParams {
  int crop_x = 0;
  int crop_y = 0;
  int crop_size = 0;
  bool hflip = false;
  int temporal_start = 0;
  std::vector<int> frame_indices;  // strictly increasing within [0, T)
};

// Train mode: random square crop (side uniform in [0.75H, H], resized back
// to H by nearest neighbor), hflip with probability 1/2, random temporal
// start. Eval mode: full-size centered crop, no flip, centered window.
ViewParams sample_view(std::uint64_t step_seed, ViewMode mode,
                       const DatasetConfig& config);

// One ViewParams applied identically to every modality: appearance and flow
// are cropped/resized/flipped together (flow x negated and mirrored under
// hflip, magnitudes scaled by the zoom factor), layout boxes follow the same
// transform and are clipped to the canvas, spectro is only cropped in time.
MultimodalExample apply_view(const MultimodalExample& example,
                             const ViewParams& view);

// Boxes drawn as 2px-thick outlines in fixed per-category colors on a white
// canvas; the omnivorous model's view of the layout modality.
TensorF rasterize_layout(const std::vector<std::vector<LayoutBox>>& frames,
                         const DatasetConfig& config);

// ---- shard files ------------------------------------------------------------

std::vector<std::uint8_t> encode_shard(const Shard& shard);
Shard decode_shard(const std::vector<std::uint8_t>& buf);
void save_shard(const std::filesystem::path& path, const Shard& shard);
Shard load_shard(const std::filesystem::path& path);

}  // namespace mmkd
