#include "mmkd/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mmkd/rng.hpp"

namespace mmkd {

namespace {

constexpr int kConv1 = 16;
constexpr int kConv2 = 32;
constexpr int kConv3 = 64;
constexpr int kTrunk = 128;
constexpr int kBoxEmbed = 32;
constexpr int kFrameEmbed = 64;

// Three valid 3x3 stride-2 convolutions eat 14 pixels of context.
constexpr int kMinGridSide = 15;

}  // namespace

std::string to_string(Modality modality) {
  switch (modality) {
    case Modality::kAppearance: return "appearance";
    case Modality::kFlow: return "flow";
    case Modality::kLayout: return "layout";
    case Modality::kSpectro: return "spectro";
    case Modality::kOmni: return "omni";
  }
  throw ContractError("to_string: unknown modality tag");
}

Modality modality_from_string(const std::string& name) {
  if (name == "appearance") return Modality::kAppearance;
  if (name == "flow") return Modality::kFlow;
  if (name == "layout") return Modality::kLayout;
  if (name == "spectro") return Modality::kSpectro;
  if (name == "omni") return Modality::kOmni;
  throw ConfigError("unknown modality \"" + name +
                    "\" (want appearance|flow|layout|spectro|omni)");
}

const std::vector<Modality>& data_modalities() {
  static const std::vector<Modality> kAll = {
      Modality::kAppearance, Modality::kFlow, Modality::kLayout,
      Modality::kSpectro};
  return kAll;
}

std::string to_string(HeadMode mode) {
  return mode == HeadMode::kSingle ? "single" : "dual";
}

HeadMode head_mode_from_string(const std::string& name) {
  if (name == "single") return HeadMode::kSingle;
  if (name == "dual") return HeadMode::kDual;
  throw ConfigError("unknown head mode \"" + name + "\" (want single|dual)");
}

void to_json(nlohmann::json& j, const ModelConfig& config) {
  j = nlohmann::json{
      {"modality", to_string(config.modality)},
      {"encoder", config.encoder == EncoderKind::kGrid ? "grid" : "boxes"},
      {"heads", to_string(config.heads)},
      {"num_nouns", config.num_nouns},
      {"num_verbs", config.num_verbs},
      {"in_channels", config.in_channels},
      {"input_size", config.input_size},
      {"box_categories", config.box_categories},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& config) {
  config.modality = modality_from_string(j.at("modality").get<std::string>());
  const std::string enc = j.at("encoder").get<std::string>();
  if (enc != "grid" && enc != "boxes")
    throw ConfigError("unknown encoder \"" + enc + "\" (want grid|boxes)");
  config.encoder = enc == "grid" ? EncoderKind::kGrid : EncoderKind::kBoxes;
  config.heads = head_mode_from_string(j.at("heads").get<std::string>());
  config.num_nouns = j.at("num_nouns").get<int>();
  config.num_verbs = j.at("num_verbs").get<int>();
  config.in_channels = j.at("in_channels").get<int>();
  config.input_size = j.at("input_size").get<int>();
  config.box_categories = j.at("box_categories").get<int>();
}

ModelConfig model_config_for(Modality modality, HeadMode heads,
                             const DatasetConfig& data) {
  ModelConfig c;
  c.modality = modality;
  c.heads = heads;
  c.num_nouns = data.num_nouns;
  c.num_verbs = data.num_verbs;
  c.box_categories = 1 + data.num_nouns;
  c.input_size = data.height;
  switch (modality) {
    case Modality::kAppearance:
      c.in_channels = 3;
      break;
    case Modality::kFlow:
      c.in_channels = 2;
      break;
    case Modality::kSpectro:
      c.in_channels = 1;
      c.input_size = data.spectro_bins;
      break;
    case Modality::kLayout:
      c.encoder = EncoderKind::kBoxes;
      c.in_channels = 0;
      break;
    case Modality::kOmni:
      c.in_channels = 3;
      break;
  }
  return c;
}

namespace {

struct ParamSpec {
  std::string name;
  Shape shape;
};

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  if (c.num_nouns < 1 || c.num_verbs < 1)
    throw ConfigError("model needs at least one noun and one verb class");
  std::vector<ParamSpec> specs;
  if (c.encoder == EncoderKind::kGrid) {
    if (c.in_channels < 1)
      throw ConfigError("grid encoder needs at least one input channel");
    if (c.input_size < kMinGridSide)
      throw ConfigError(
          "grid encoder needs input side >= " + std::to_string(kMinGridSide) +
          " for three stride-2 3x3 convolutions, got " +
          std::to_string(c.input_size));
    specs.push_back({"conv1.w", {kConv1, c.in_channels, 3, 3}});
    specs.push_back({"conv2.w", {kConv2, kConv1, 3, 3}});
    specs.push_back({"conv3.w", {kConv3, kConv2, 3, 3}});
  } else {
    if (c.box_categories < 1)
      throw ConfigError("boxes encoder needs at least one box category");
    specs.push_back({"box.w", {c.box_feature_dim(), kBoxEmbed}});
    specs.push_back({"box.b", {kBoxEmbed}});
    specs.push_back({"frame.w", {kBoxEmbed, kFrameEmbed}});
    specs.push_back({"frame.b", {kFrameEmbed}});
  }
  specs.push_back({"temporal.w", {kConv3, kTrunk}});
  specs.push_back({"temporal.b", {kTrunk}});
  if (c.heads == HeadMode::kSingle) {
    specs.push_back({"action_head.w", {kTrunk, c.num_actions()}});
    specs.push_back({"action_head.b", {c.num_actions()}});
  } else {
    specs.push_back({"noun_head.w", {kTrunk, c.num_nouns}});
    specs.push_back({"noun_head.b", {c.num_nouns}});
    specs.push_back({"verb_head.w", {kTrunk, c.num_verbs}});
    specs.push_back({"verb_head.b", {c.num_verbs}});
  }
  return specs;
}

std::int64_t fan_in_of(const Shape& shape) {
  if (shape.size() == 4) return shape[1] * shape[2] * shape[3];
  return shape[0];
}

}  // namespace

TensorF& Model::param(const std::string& name) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return values[i];
  throw ContractError("model has no parameter \"" + name + "\"");
}

const TensorF& Model::param(const std::string& name) const {
  return const_cast<Model*>(this)->param(name);
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& v : values) n += v.numel();
  return n;
}

Model model_init(const ModelConfig& config, std::uint64_t seed) {
  Model m;
  m.config = config;
  for (const auto& spec : param_specs(config)) {
    TensorF t(spec.shape);
    if (spec.name.ends_with(".b")) {
      // zeros already
    } else {
      const double bound = std::sqrt(1.0 / double(fan_in_of(spec.shape)));
      CounterRng rng(derive_tag(seed, spec.name));
      for (auto& v : t.storage())
        v = float((2.0 * rng.next_unit() - 1.0) * bound);
    }
    m.names.push_back(spec.name);
    m.values.push_back(std::move(t));
  }
  return m;
}

Checkpoint to_checkpoint(const Model& model) {
  Checkpoint ck;
  ck.meta["kind"] = "model";
  ck.meta["model"] = model.config;
  for (std::size_t i = 0; i < model.names.size(); ++i)
    ck.add(model.names[i], model.values[i]);
  return ck;
}

Model model_from_checkpoint(const Checkpoint& checkpoint) {
  if (!checkpoint.meta.contains("model"))
    throw IoError("checkpoint carries no model manifest");
  Model m;
  m.config = checkpoint.meta.at("model").get<ModelConfig>();
  for (const auto& spec : param_specs(m.config)) {
    const TensorF& t = checkpoint.tensor(spec.name);
    if (t.shape() != spec.shape)
      throw IoError("checkpoint tensor \"" + spec.name + "\" has shape " +
                    shape_str(t.shape()) + ", model wants " +
                    shape_str(spec.shape));
    m.names.push_back(spec.name);
    m.values.push_back(t);
  }
  return m;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  save_checkpoint(path, to_checkpoint(model));
}

Model load_model(const std::filesystem::path& path) {
  return model_from_checkpoint(load_checkpoint(path));
}

// ---- forward ----------------------------------------------------------------

StagedModel stage_model(Tape<float>& tape, const Model& model) {
  StagedModel staged;
  staged.model = &model;
  staged.leaves.reserve(model.values.size());
  for (const auto& v : model.values) staged.leaves.push_back(tape.leaf(v));
  return staged;
}

namespace {

Value<float> staged_param(const StagedModel& staged, const std::string& name) {
  const auto& names = staged.model->names;
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return staged.leaves[i];
  throw ContractError("model has no parameter \"" + name + "\"");
}

Value<float> dense(Tape<float>&, const StagedModel& staged, Value<float> x,
                   const std::string& prefix) {
  return bias_add(matmul(x, staged_param(staged, prefix + ".w")),
                  staged_param(staged, prefix + ".b"));
}

// Nearest-neighbor square resize, same center-sampling rule the view
// pipeline uses (exact identity when sizes match).
void resize_plane(const float* src, int src_side, float* dst, int dst_side) {
  for (int i = 0; i < dst_side; ++i) {
    const int si = ((2 * i + 1) * src_side) / (2 * dst_side);
    for (int j = 0; j < dst_side; ++j) {
      const int sj = ((2 * j + 1) * src_side) / (2 * dst_side);
      dst[i * dst_side + j] = src[si * src_side + sj];
    }
  }
}

TensorF to_omni_frames(const MultimodalExample& ex, Modality source,
                       const DatasetConfig& data) {
  const int S = data.height;
  switch (source) {
    case Modality::kAppearance:
      return ex.appearance;
    case Modality::kFlow: {
      const int T = int(ex.flow.dim(0));
      TensorF out({T, 3, S, S});
      for (int t = 0; t < T; ++t)
        std::memcpy(out.data() + (t * 3) * S * S,
                    ex.flow.data() + (t * 2) * S * S,
                    sizeof(float) * 2 * S * S);
      return out;  // third channel stays zero
    }
    case Modality::kLayout:
      return rasterize_layout(ex.layout, data);
    case Modality::kSpectro: {
      const int T = int(ex.spectro.dim(0));
      const int F = int(ex.spectro.dim(2));
      TensorF out({T, 3, S, S});
      std::vector<float> plane(std::size_t(S) * S);
      for (int t = 0; t < T; ++t) {
        resize_plane(ex.spectro.data() + std::int64_t(t) * F * F, F,
                     plane.data(), S);
        for (int c = 0; c < 3; ++c)
          std::memcpy(out.data() + (std::int64_t(t) * 3 + c) * S * S,
                      plane.data(), sizeof(float) * plane.size());
      }
      return out;
    }
    case Modality::kOmni:
      break;
  }
  throw ContractError("omni input must come from a data modality");
}

const TensorF& native_tensor(const MultimodalExample& ex, Modality source) {
  switch (source) {
    case Modality::kAppearance: return ex.appearance;
    case Modality::kFlow: return ex.flow;
    case Modality::kSpectro: return ex.spectro;
    default: break;
  }
  throw ContractError("modality " + to_string(source) +
                      " has no grid tensor");
}

}  // namespace

ModelInput assemble_input(const ModelConfig& config, Modality source,
                          const DatasetConfig& data,
                          const std::vector<MultimodalExample>& viewed) {
  if (viewed.empty()) throw ContractError("assemble_input: empty batch");
  if (config.modality != Modality::kOmni && source != config.modality)
    throw ContractError("modality mismatch: model encodes " +
                        to_string(config.modality) + ", batch holds " +
                        to_string(source));

  ModelInput input;
  input.batch_size = int(viewed.size());

  if (config.encoder == EncoderKind::kBoxes) {
    const float S = float(data.height);
    input.frames_per_example = int(viewed.front().layout.size());
    std::int64_t total = 0;
    for (const auto& ex : viewed) {
      if (int(ex.layout.size()) != input.frames_per_example)
        throw ContractError("assemble_input: ragged frame counts in batch");
      for (const auto& frame : ex.layout) total += std::int64_t(frame.size());
    }
    if (total == 0)
      throw ContractError("assemble_input: batch contains no boxes");

    const int D = config.box_feature_dim();
    const std::int64_t rows =
        std::int64_t(input.batch_size) * input.frames_per_example;
    input.box_feats = TensorF({total, D});
    input.frame_pool = TensorF({rows, total});
    auto pool = input.frame_pool.as_rows();
    std::int64_t box = 0, row = 0;
    for (const auto& ex : viewed) {
      for (const auto& frame : ex.layout) {
        for (const auto& b : frame) {
          if (b.category >= config.box_categories)
            throw ContractError(
                "box category " + std::to_string(int(b.category)) +
                " out of range for a model with " +
                std::to_string(config.box_categories) + " categories");
          float* f = input.box_feats.data() + box * D;
          f[0] = b.x / S;
          f[1] = b.y / S;
          f[2] = b.w / S;
          f[3] = b.h / S;
          f[4 + b.category] = 1.0f;
          ++box;
        }
        if (!frame.empty()) {
          const float inv = 1.0f / float(frame.size());
          for (std::size_t k = 0; k < frame.size(); ++k)
            pool(row, box - std::int64_t(frame.size()) + std::int64_t(k)) =
                inv;
        }
        ++row;
      }
    }
    return input;
  }

  // grid encoders
  std::vector<TensorF> converted;
  const TensorF* first = nullptr;
  if (config.modality == Modality::kOmni) {
    converted.reserve(viewed.size());
    for (const auto& ex : viewed)
      converted.push_back(to_omni_frames(ex, source, data));
    first = &converted.front();
  } else {
    first = &native_tensor(viewed.front(), source);
  }

  if (first->ndim() != 4 || first->dim(1) != config.in_channels ||
      first->dim(2) != config.input_size ||
      first->dim(3) != config.input_size)
    throw ShapeError("assemble_input: want [T, " +
                     std::to_string(config.in_channels) + ", " +
                     std::to_string(config.input_size) + ", " +
                     std::to_string(config.input_size) + "], got " +
                     shape_str(first->shape()));

  input.frames_per_example = int(first->dim(0));
  const std::int64_t per = first->numel();
  input.frames = TensorF({std::int64_t(input.batch_size) *
                              input.frames_per_example,
                          config.in_channels, config.input_size,
                          config.input_size});
  for (int i = 0; i < input.batch_size; ++i) {
    const TensorF& t = config.modality == Modality::kOmni
                           ? converted[std::size_t(i)]
                           : native_tensor(viewed[std::size_t(i)], source);
    if (t.shape() != first->shape())
      throw ContractError("assemble_input: ragged frame counts in batch");
    std::memcpy(input.frames.data() + per * i, t.data(), sizeof(float) * per);
  }
  return input;
}

HeadValues forward(Tape<float>& tape, const StagedModel& staged,
                   const ModelInput& input) {
  const ModelConfig& c = staged.model->config;
  const std::int64_t F = input.frames_per_example;

  Value<float> clip = [&] {
    if (c.encoder == EncoderKind::kGrid) {
      auto x = tape.leaf(input.frames);
      auto h1 = relu(conv2d(x, staged_param(staged, "conv1.w"), 2));
      auto h2 = relu(conv2d(h1, staged_param(staged, "conv2.w"), 2));
      auto h3 = relu(conv2d(h2, staged_param(staged, "conv3.w"), 2));
      return group_mean(spatial_mean(h3), F);
    }
    auto feats = tape.leaf(input.box_feats);
    auto embed = relu(dense(tape, staged, feats, "box"));
    auto frames = matmul(tape.leaf(input.frame_pool), embed);
    auto refined = relu(dense(tape, staged, frames, "frame"));
    return group_mean(refined, F);
  }();

  auto trunk = relu(dense(tape, staged, clip, "temporal"));

  HeadValues out;
  if (c.heads == HeadMode::kSingle) {
    out.action = dense(tape, staged, trunk, "action_head");
  } else {
    out.noun = dense(tape, staged, trunk, "noun_head");
    out.verb = dense(tape, staged, trunk, "verb_head");
  }
  return out;
}

HeadLogits forward_logits(const Model& model, Modality source,
                          const DatasetConfig& data,
                          const std::vector<MultimodalExample>& viewed) {
  Tape<float> tape;
  const StagedModel staged = stage_model(tape, model);
  const ModelInput input =
      assemble_input(model.config, source, data, viewed);
  const HeadValues values = forward(tape, staged, input);
  HeadLogits out;
  if (values.action) out.action = values.action->val();
  if (values.noun) out.noun = values.noun->val();
  if (values.verb) out.verb = values.verb->val();
  return out;
}

// ---- test-time augmentation ---------------------------------------------------

std::vector<int> tta_temporal_starts(int total_frames, int window, int clips) {
  if (window < 1 || window > total_frames)
    throw ContractError("tta: window " + std::to_string(window) +
                        " does not fit " + std::to_string(total_frames) +
                        " frames");
  const int span = total_frames - window;
  if (clips < 1)
    throw ContractError("tta: need at least one temporal clip");
  if (clips > span + 1)
    throw ContractError("tta: " + std::to_string(clips) +
                        " clips exceed the " + std::to_string(span + 1) +
                        " distinct windows of a " +
                        std::to_string(total_frames) +
                        "-frame clip with window " + std::to_string(window));
  std::vector<int> starts;
  if (clips == 1) {
    starts.push_back(span / 2);
    return starts;
  }
  for (int i = 0; i < clips; ++i)
    starts.push_back((2 * i * span + (clips - 1)) / (2 * (clips - 1)));
  return starts;
}

TtaLogits tta_forward(const Model& model, Modality source,
                      const MultimodalExample& example,
                      const DatasetConfig& data, int temporal_clips,
                      int spatial_crops) {
  const int S = data.height;
  const std::vector<int> starts =
      tta_temporal_starts(data.frames, data.view_frames, temporal_clips);

  std::vector<std::pair<int, int>> crops;  // (x or y offset, size)
  if (spatial_crops == 1) {
    crops.emplace_back(0, S);
  } else if (spatial_crops == 3) {
    const int s = (3 * S + 3) / 4;
    crops.emplace_back(0, s);
    crops.emplace_back((S - s) / 2, s);
    crops.emplace_back(S - s, s);
  } else {
    throw ContractError("tta: spatial_crops must be 1 or 3, got " +
                        std::to_string(spatial_crops));
  }

  std::vector<std::vector<double>> sums;
  auto accumulate = [&](const std::optional<TensorF>& logits,
                        std::size_t slot) {
    if (!logits) return;
    if (sums.size() <= slot) sums.resize(slot + 1);
    auto& acc = sums[slot];
    if (acc.empty()) acc.assign(std::size_t(logits->numel()), 0.0);
    for (std::int64_t i = 0; i < logits->numel(); ++i)
      acc[std::size_t(i)] += double(logits->data()[i]);
  };

  for (int start : starts) {
    for (const auto& [offset, size] : crops) {
      ViewParams view;
      view.crop_x = offset;
      view.crop_y = (S - size) / 2;
      view.crop_size = size;
      view.hflip = false;
      view.temporal_start = start;
      view.frame_indices.resize(std::size_t(data.view_frames));
      for (int i = 0; i < data.view_frames; ++i)
        view.frame_indices[std::size_t(i)] = start + i;
      const HeadLogits logits =
          forward_logits(model, source, data, {apply_view(example, view)});
      accumulate(logits.action, 0);
      accumulate(logits.noun, 1);
      accumulate(logits.verb, 2);
    }
  }

  const double inv = 1.0 / (double(starts.size()) * double(crops.size()));
  auto finish = [&](std::size_t slot) -> std::optional<TensorD> {
    if (sums.size() <= slot || sums[slot].empty()) return std::nullopt;
    TensorD t({std::int64_t(sums[slot].size())});
    for (std::size_t i = 0; i < sums[slot].size(); ++i)
      t.data()[std::int64_t(i)] = sums[slot][i] * inv;
    return t;
  };

  TtaLogits out;
  out.action = finish(0);
  out.noun = finish(1);
  out.verb = finish(2);
  return out;
}

}  // namespace mmkd
