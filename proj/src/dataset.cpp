#include "mmkd/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "mmkd/error.hpp"
#include "mmkd/io.hpp"
#include "mmkd/rng.hpp"
#include "mmkd/threadpool.hpp"

namespace mmkd {

std::string to_string(SplitMode mode) {
  return mode == SplitMode::kIid ? "iid" : "compositional";
}

SplitMode split_mode_from_string(const std::string& s) {
  if (s == "iid") return SplitMode::kIid;
  if (s == "compositional") return SplitMode::kCompositional;
  throw ConfigError("unknown split_mode '" + s +
                    "' (expected 'iid' or 'compositional')");
}

void validate(const DatasetConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (c.num_nouns < 2 || c.num_nouns > 8)
    fail("num_nouns must be in [2, 8] (8 shape classes are defined)");
  if (c.num_verbs < 2 || c.num_verbs > 4)
    fail("num_verbs must be in [2, 4] (4 motion programs are defined)");
  if (c.frames < 4) fail("frames must be >= 4");
  if (c.height != c.width) fail("height and width must be equal");
  if (c.height < 24 || c.height > 64) fail("height must be in [24, 64]");
  if (c.spectro_bins < 8 || c.spectro_bins > 64)
    fail("spectro_bins must be in [8, 64]");
  if (c.num_train < 1) fail("num_train must be >= 1");
  if (c.num_val < 1) fail("num_val must be >= 1");
  if (c.holdout_size < 1) fail("holdout_size must be >= 1");
  if (c.appearance_bias_strength < 0.0 || c.appearance_bias_strength > 1.0)
    fail("appearance_bias_strength must be in [0, 1]");
  if (c.spectro_noise < 0.0) fail("spectro_noise must be >= 0");
  if (c.view_frames < 1 || c.view_frames > c.frames)
    fail("view_frames must be in [1, frames]");
  if (!c.holdout_nouns.empty()) {
    if (c.split_mode != SplitMode::kCompositional)
      fail("holdout_nouns requires compositional split_mode");
    if (static_cast<int>(c.holdout_nouns.size()) >= c.num_nouns)
      fail("holdout_nouns must leave at least one noun for training");
    std::vector<int> sorted = c.holdout_nouns;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] < 0 || sorted[i] >= c.num_nouns)
        fail("holdout_nouns entries must be in [0, num_nouns)");
      if (i > 0 && sorted[i] == sorted[i - 1])
        fail("holdout_nouns entries must be distinct");
    }
  }
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"num_nouns", c.num_nouns},
                     {"num_verbs", c.num_verbs},
                     {"frames", c.frames},
                     {"height", c.height},
                     {"width", c.width},
                     {"spectro_bins", c.spectro_bins},
                     {"num_train", c.num_train},
                     {"num_val", c.num_val},
                     {"holdout_size", c.holdout_size},
                     {"appearance_bias_strength", c.appearance_bias_strength},
                     {"spectro_noise", c.spectro_noise},
                     {"split_mode", to_string(c.split_mode)},
                     {"holdout_nouns", c.holdout_nouns},
                     {"view_frames", c.view_frames},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c.num_nouns = j.value("num_nouns", c.num_nouns);
  c.num_verbs = j.value("num_verbs", c.num_verbs);
  c.frames = j.value("frames", c.frames);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.spectro_bins = j.value("spectro_bins", c.spectro_bins);
  c.num_train = j.value("num_train", c.num_train);
  c.num_val = j.value("num_val", c.num_val);
  c.holdout_size = j.value("holdout_size", c.holdout_size);
  c.appearance_bias_strength =
      j.value("appearance_bias_strength", c.appearance_bias_strength);
  c.spectro_noise = j.value("spectro_noise", c.spectro_noise);
  if (j.contains("split_mode"))
    c.split_mode = split_mode_from_string(j.at("split_mode").get<std::string>());
  c.holdout_nouns = j.value("holdout_nouns", c.holdout_nouns);
  c.view_frames = j.value("view_frames", c.view_frames);
  c.seed = j.value("seed", c.seed);
}

namespace {

struct IBox {
  int x = 0, y = 0, w = 0, h = 0;
};

// 8 noun shapes as membership tests over box-normalized coordinates. The
// object is always the same flat gray, so shape geometry is the only
// appearance cue for the noun that survives outside the biased backgrounds.
bool shape_mask(int noun, double u, double v) {
  const double du = u - 0.5, dv = v - 0.5;
  switch (noun) {
    case 0: return true;                                        // solid square
    case 1: return std::min({u, 1 - u, v, 1 - v}) < 0.22;       // frame
    case 2: return du * du + dv * dv <= 0.25;                   // disk
    case 3: {                                                   // ring
      const double r2 = du * du + dv * dv;
      return r2 >= 0.09 && r2 <= 0.25;
    }
    case 4: return std::abs(u - v) <= 0.2 ||                    // X
                   std::abs(u + v - 1) <= 0.2;
    case 5: return std::abs(du) <= 0.16 || std::abs(dv) <= 0.16;  // plus
    case 6: return std::abs(du) <= 0.5 * v;                      // triangle
    default: return std::abs(du) + std::abs(dv) <= 0.5;          // diamond
  }
}

struct Rgb {
  float r, g, b;
};

constexpr Rgb kBiasTints[8] = {
    {0.85f, 0.20f, 0.20f}, {0.20f, 0.75f, 0.25f}, {0.20f, 0.35f, 0.90f},
    {0.85f, 0.80f, 0.20f}, {0.80f, 0.25f, 0.80f}, {0.20f, 0.80f, 0.80f},
    {0.90f, 0.55f, 0.15f}, {0.60f, 0.60f, 0.60f}};

constexpr Rgb kLayoutColors[9] = {
    {0.10f, 0.35f, 0.95f}, {0.90f, 0.15f, 0.15f}, {0.10f, 0.70f, 0.20f},
    {0.95f, 0.60f, 0.10f}, {0.55f, 0.15f, 0.80f}, {0.05f, 0.75f, 0.75f},
    {0.90f, 0.20f, 0.75f}, {0.55f, 0.55f, 0.10f}, {0.40f, 0.25f, 0.10f}};

constexpr Rgb kHandColor = {0.85f, 0.70f, 0.55f};
constexpr float kObjectGray = 0.85f;
constexpr float kBgGray = 0.12f;
constexpr float kGhostAlpha1 = 0.45f;  // one frame back
constexpr float kGhostAlpha2 = 0.22f;  // two frames back

int scaled(int v, int size) { return (v * size) / 32; }

// Hand distractor: small box random-walking inside the top-left zone. Object
// programs keep y at or below the zone, so hand and object never overlap.
std::vector<IBox> hand_track(CounterRng& rng, int T, int S) {
  const int zone = scaled(10, S);
  IBox b;
  b.w = scaled(4, S) + rng.next_int(scaled(3, S));
  b.h = scaled(4, S) + rng.next_int(scaled(3, S));
  b.x = 1 + rng.next_int(std::max(1, zone - b.w - 1));
  b.y = 1 + rng.next_int(std::max(1, zone - b.h - 1));
  std::vector<IBox> track(T, b);
  for (int t = 1; t < T; ++t) {
    b.x = std::clamp(b.x + rng.next_int(3) - 1, 0, zone - b.w);
    b.y = std::clamp(b.y + rng.next_int(3) - 1, 0, zone - b.h);
    track[t] = b;
  }
  return track;
}

// Verb motion programs. Each verb owns a distinct band of positions (not
// just a direction), so the verb stays decodable from layout and flow even
// after order-insensitive pooling:
//   0 move-left   upper object band, sweeping right edge -> center
//   1 move-right  middle band, sweeping left edge -> center
//   2 move-up     left-of-center column, sweeping bottom -> middle
//   3 grow        centered box inflating ~3x
std::vector<IBox> object_track(int verb, CounterRng& rng, int T, int S) {
  const int y_floor = scaled(12, S);
  std::vector<IBox> track(T);
  if (verb == 3) {
    const int cx = scaled(15, S) + rng.next_int(scaled(3, S));
    const int cy = scaled(19, S) + rng.next_int(scaled(3, S));
    const int w0 = scaled(5, S) + rng.next_int(2);
    const int w1 = scaled(14, S) + rng.next_int(scaled(3, S));
    for (int t = 0; t < T; ++t) {
      const int w =
          w0 + static_cast<int>(std::lround(double(w1 - w0) * t / (T - 1)));
      track[t] = {cx - w / 2, cy - w / 2, w, w};
    }
    return track;
  }
  IBox b;
  b.w = scaled(5, S) + rng.next_int(2);
  b.h = scaled(5, S) + rng.next_int(2);
  int dx = 0, dy = 0;
  switch (verb) {
    case 0:  // move-left
      b.y = y_floor + rng.next_int(3);
      b.x = S - b.w - 2 - rng.next_int(2);
      dx = -(1 + rng.next_int(2));
      break;
    case 1:  // move-right
      b.y = y_floor + scaled(4, S) + rng.next_int(3);
      b.x = 1 + rng.next_int(3);
      dx = 1 + rng.next_int(2);
      break;
    default:  // move-up
      b.x = scaled(12, S) + rng.next_int(scaled(9, S));
      b.y = S - b.h - 1;
      dy = -1;
      break;
  }
  for (int t = 0; t < T; ++t) {
    track[t] = b;
    b.x = std::clamp(b.x + dx, 1, S - b.w - 1);
    b.y = std::clamp(b.y + dy, y_floor, S - b.h - 1);
  }
  return track;
}

void fill_box(TensorF& frame, const IBox& b, Rgb color, int H, int W) {
  for (int c = 0; c < 3; ++c) {
    const float v = c == 0 ? color.r : (c == 1 ? color.g : color.b);
    for (int i = std::max(0, b.y); i < std::min(H, b.y + b.h); ++i)
      for (int j = std::max(0, b.x); j < std::min(W, b.x + b.w); ++j)
        frame.at({0, c, i, j}) = v;
  }
}

void blend_shape(TensorF& frame, const IBox& b, int noun, float alpha, int H,
                 int W) {
  for (int i = std::max(0, b.y); i < std::min(H, b.y + b.h); ++i)
    for (int j = std::max(0, b.x); j < std::min(W, b.x + b.w); ++j) {
      const double u = (j - b.x + 0.5) / b.w;
      const double v = (i - b.y + 0.5) / b.h;
      if (!shape_mask(noun, u, v)) continue;
      for (int c = 0; c < 3; ++c) {
        float& px = frame.at({0, c, i, j});
        px = (1.0f - alpha) * px + alpha * kObjectGray;
      }
    }
}

}  // namespace

MultimodalExample generate_example(std::uint64_t example_seed,
                                   const DatasetConfig& config,
                                   bool train_side) {
  validate(config);
  const int T = config.frames, S = config.height, F = config.spectro_bins;

  MultimodalExample ex;
  ex.appearance = TensorF({T, 3, S, S});
  ex.flow = TensorF({T, 2, S, S});
  ex.spectro = TensorF({T, 1, F, F});
  ex.layout.resize(static_cast<std::size_t>(T));

  // Label draw: in compositional mode with noun-holdout, the two sides use
  // disjoint noun sets; otherwise all nouns are allowed on both sides.
  std::vector<int> allowed;
  if (config.split_mode == SplitMode::kCompositional &&
      !config.holdout_nouns.empty()) {
    if (train_side) {
      for (int n = 0; n < config.num_nouns; ++n)
        if (std::find(config.holdout_nouns.begin(), config.holdout_nouns.end(),
                      n) == config.holdout_nouns.end())
          allowed.push_back(n);
    } else {
      allowed = config.holdout_nouns;
      std::sort(allowed.begin(), allowed.end());
    }
  } else {
    for (int n = 0; n < config.num_nouns; ++n) allowed.push_back(n);
  }

  CounterRng labels(derive_tag(example_seed, "labels"));
  ex.noun = allowed[labels.next_int(static_cast<int>(allowed.size()))];
  ex.verb = labels.next_int(config.num_verbs);
  ex.action = ex.noun * config.num_verbs + ex.verb;

  CounterRng motion(derive_tag(example_seed, "motion"));
  const std::vector<IBox> hand = hand_track(motion, T, S);
  const std::vector<IBox> obj = object_track(ex.verb, motion, T, S);

  for (int t = 0; t < T; ++t) {
    ex.layout[t].push_back({float(hand[t].x), float(hand[t].y),
                            float(hand[t].w), float(hand[t].h), 0});
    ex.layout[t].push_back({float(obj[t].x), float(obj[t].y), float(obj[t].w),
                            float(obj[t].h),
                            static_cast<std::uint8_t>(ex.noun + 1)});
  }

  // Appearance: noisy gray background, optional noun-keyed stripe texture
  // (the shortcut), motion trail ghosts, hand, then the object on top.
  CounterRng texture(derive_tag(example_seed, "texture"));
  const bool biased =
      train_side && texture.next_unit() < config.appearance_bias_strength;
  const int stripe_period = 3 + ex.noun % 3;
  const int stripe_dir = (ex.noun / 3) % 2 == 0 ? 1 : -1;
  const Rgb tint = kBiasTints[ex.noun];

  CounterRng app_noise(derive_tag(example_seed, "appearance-noise"));
  for (int t = 0; t < T; ++t) {
    TensorF frame({1, 3, S, S});
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j) {
        const float base =
            kBgGray + 0.02f * static_cast<float>(app_noise.next_gauss());
        float r = base, g = base, b = base;
        if (biased &&
            ((j + stripe_dir * i) % stripe_period + stripe_period) %
                    stripe_period ==
                0) {
          r = 0.5f * r + 0.5f * tint.r;
          g = 0.5f * g + 0.5f * tint.g;
          b = 0.5f * b + 0.5f * tint.b;
        }
        frame.at({0, 0, i, j}) = r;
        frame.at({0, 1, i, j}) = g;
        frame.at({0, 2, i, j}) = b;
      }
    if (t >= 2) blend_shape(frame, obj[t - 2], ex.noun, kGhostAlpha2, S, S);
    if (t >= 1) blend_shape(frame, obj[t - 1], ex.noun, kGhostAlpha1, S, S);
    fill_box(frame, hand[t], kHandColor, S, S);
    blend_shape(frame, obj[t], ex.noun, 1.0f, S, S);
    for (std::int64_t k = 0; k < frame.numel(); ++k)
      ex.appearance[t * frame.numel() + k] =
          std::clamp(frame[k], 0.0f, 1.0f);
  }

  // Flow: analytic velocity field. Inside a translating box every pixel
  // carries that box's frame-to-frame displacement; a growing box carries
  // the radial field of uniform scaling about its center. Zero elsewhere and
  // on the last frame.
  for (int t = 0; t + 1 < T; ++t) {
    auto put_translation = [&](const IBox& a, const IBox& b) {
      const float dx = float(b.x - a.x), dy = float(b.y - a.y);
      for (int i = std::max(0, a.y); i < std::min(S, a.y + a.h); ++i)
        for (int j = std::max(0, a.x); j < std::min(S, a.x + a.w); ++j) {
          ex.flow.at({t, 0, i, j}) = dx;
          ex.flow.at({t, 1, i, j}) = dy;
        }
    };
    put_translation(hand[t], hand[t + 1]);
    if (ex.verb == 3) {
      const IBox &a = obj[t], &b = obj[t + 1];
      const double cx = a.x + a.w / 2.0, cy = a.y + a.h / 2.0;
      const double ncx = b.x + b.w / 2.0, ncy = b.y + b.h / 2.0;
      const double r = double(b.w - a.w) / a.w;
      for (int i = std::max(0, a.y); i < std::min(S, a.y + a.h); ++i)
        for (int j = std::max(0, a.x); j < std::min(S, a.x + a.w); ++j) {
          ex.flow.at({t, 0, i, j}) =
              static_cast<float>((ncx - cx) + (j + 0.5 - cx) * r);
          ex.flow.at({t, 1, i, j}) =
              static_cast<float>((ncy - cy) + (i + 0.5 - cy) * r);
        }
    } else {
      put_translation(obj[t], obj[t + 1]);
    }
  }

  // Spectro: per-verb band pattern over frequency bins, distinguishable by
  // local texture (single / paired / dashed / thick band), plus seeded noise.
  CounterRng spec_noise(derive_tag(example_seed, "spectro-noise"));
  const int lo = 2, hi = F - 3;
  for (int t = 0; t < T; ++t) {
    const int sweep = lo + ((hi - lo) * t) / (T - 1);
    for (int i = 0; i < F; ++i)
      for (int j = 0; j < F; ++j) {
        float v = 0.08f;
        bool on = false;
        switch (ex.verb) {
          case 0: on = i == sweep; break;
          case 1: {
            const int r = lo + hi - sweep;
            on = i == r || i == std::min(r + 2, F - 1);
            break;
          }
          case 2: on = (i == lo + 2 || i == hi - 2) && j % 2 == 0; break;
          default: on = std::abs(i - F / 2) <= 1; break;
        }
        if (on) v = 0.85f;
        v += static_cast<float>(config.spectro_noise *
                                spec_noise.next_gauss());
        ex.spectro.at({t, 0, i, j}) = std::clamp(v, 0.0f, 1.0f);
      }
  }

  return ex;
}

Splits build_splits(const DatasetConfig& config, int threads) {
  validate(config);
  if (config.holdout_size >= config.num_train)
    throw ConfigError("holdout_size (" + std::to_string(config.holdout_size) +
                      ") must be smaller than num_train (" +
                      std::to_string(config.num_train) + ")");

  const int total = config.num_train + config.num_val;
  std::vector<MultimodalExample> all(static_cast<std::size_t>(total));
  const bool val_biased = config.split_mode == SplitMode::kIid;
  parallel_for(total, threads, [&](std::int64_t i) {
    const bool train_side = i < config.num_train || val_biased;
    all[i] = generate_example(derive_seed(config.seed, std::uint64_t(i)),
                              config, train_side);
    all[i].id = std::uint64_t(i);
  });

  // The holdout is a seeded random carve-out of the training pool; held-out
  // examples are excluded from all training and used only to estimate
  // teacher errors.
  std::vector<int> perm(static_cast<std::size_t>(config.num_train));
  for (int i = 0; i < config.num_train; ++i) perm[i] = i;
  CounterRng hrng(derive_tag(config.seed, "holdout-choice"));
  for (int i = config.num_train - 1; i > 0; --i)
    std::swap(perm[i], perm[hrng.next_int(i + 1)]);
  std::vector<bool> held(static_cast<std::size_t>(config.num_train), false);
  for (int i = 0; i < config.holdout_size; ++i) held[perm[i]] = true;

  Splits splits;
  splits.train.config = config;
  splits.train.split = "train";
  splits.holdout.config = config;
  splits.holdout.split = "holdout";
  splits.val.config = config;
  splits.val.split = "val";
  for (int i = 0; i < config.num_train; ++i)
    (held[i] ? splits.holdout : splits.train)
        .examples.push_back(std::move(all[i]));
  for (int i = config.num_train; i < total; ++i)
    splits.val.examples.push_back(std::move(all[i]));
  return splits;
}

// ---- views ------------------------------------------------------------------

ViewParams sample_view(std::uint64_t step_seed, ViewMode mode,
                       const DatasetConfig& config) {
  const int T = config.frames, Tp = config.view_frames, S = config.height;
  ViewParams v;
  if (mode == ViewMode::kEval) {
    v.crop_size = S;
    v.crop_x = 0;
    v.crop_y = 0;
    v.hflip = false;
    v.temporal_start = (T - Tp) / 2;
  } else {
    CounterRng rng(step_seed);
    const int smin = (3 * S + 3) / 4;
    v.crop_size = smin + rng.next_int(S - smin + 1);
    v.crop_x = rng.next_int(S - v.crop_size + 1);
    v.crop_y = rng.next_int(S - v.crop_size + 1);
    v.hflip = rng.next_bool();
    v.temporal_start = rng.next_int(T - Tp + 1);
  }
  v.frame_indices.resize(static_cast<std::size_t>(Tp));
  for (int i = 0; i < Tp; ++i) v.frame_indices[i] = v.temporal_start + i;
  return v;
}

MultimodalExample apply_view(const MultimodalExample& example,
                             const ViewParams& view) {
  const int T = static_cast<int>(example.appearance.dim(0));
  const int H = static_cast<int>(example.appearance.dim(2));
  const int W = static_cast<int>(example.appearance.dim(3));
  const int s = view.crop_size;
  if (s < 1 || view.crop_x < 0 || view.crop_y < 0 || view.crop_x + s > W ||
      view.crop_y + s > H)
    throw ContractError("view crop does not fit the canvas");
  for (std::size_t i = 0; i < view.frame_indices.size(); ++i) {
    const int f = view.frame_indices[i];
    if (f < 0 || f >= T ||
        (i > 0 && f <= view.frame_indices[i - 1]))
      throw ContractError("view frame_indices must be strictly increasing "
                          "within [0, T)");
  }

  const int Tp = static_cast<int>(view.frame_indices.size());
  const double zoom = double(H) / s;
  const int F = static_cast<int>(example.spectro.dim(2));

  MultimodalExample out;
  out.id = example.id;
  out.noun = example.noun;
  out.verb = example.verb;
  out.action = example.action;
  out.appearance = TensorF({Tp, 3, H, W});
  out.flow = TensorF({Tp, 2, H, W});
  out.spectro = TensorF({Tp, 1, F, F});
  out.layout.resize(static_cast<std::size_t>(Tp));

  // Nearest-neighbor source index for output pixel i: exact integer
  // arithmetic, so a full-size crop is the identity sample.
  auto src = [&](int i) { return ((2 * i + 1) * s) / (2 * H); };

  for (int ot = 0; ot < Tp; ++ot) {
    const int st = view.frame_indices[ot];
    for (int i = 0; i < H; ++i) {
      const int si = view.crop_y + src(i);
      for (int j = 0; j < W; ++j) {
        const int sj = view.crop_x + src(view.hflip ? W - 1 - j : j);
        for (int c = 0; c < 3; ++c)
          out.appearance.at({ot, c, i, j}) =
              example.appearance.at({st, c, si, sj});
        const float fx = example.flow.at({st, 0, si, sj});
        const float fy = example.flow.at({st, 1, si, sj});
        out.flow.at({ot, 0, i, j}) =
            static_cast<float>((view.hflip ? -fx : fx) * zoom);
        out.flow.at({ot, 1, i, j}) = static_cast<float>(fy * zoom);
      }
    }
    for (int i = 0; i < F; ++i)
      for (int j = 0; j < F; ++j)
        out.spectro.at({ot, 0, i, j}) = example.spectro.at({st, 0, i, j});

    for (const LayoutBox& b : example.layout[st]) {
      double x = (b.x - view.crop_x) * zoom;
      const double y = (b.y - view.crop_y) * zoom;
      const double w = b.w * zoom, h = b.h * zoom;
      if (view.hflip) x = W - x - w;
      const double x0 = std::max(0.0, x), y0 = std::max(0.0, y);
      const double x1 = std::min(double(W), x + w);
      const double y1 = std::min(double(H), y + h);
      if (x1 - x0 <= 0 || y1 - y0 <= 0) continue;
      out.layout[ot].push_back({float(x0), float(y0), float(x1 - x0),
                                float(y1 - y0), b.category});
    }
  }
  return out;
}

TensorF rasterize_layout(const std::vector<std::vector<LayoutBox>>& frames,
                         const DatasetConfig& config) {
  const int T = static_cast<int>(frames.size());
  const int H = config.height, W = config.width;
  TensorF out = TensorF::full({T, 3, H, W}, 1.0f);
  for (int t = 0; t < T; ++t)
    for (const LayoutBox& b : frames[t]) {
      const int x0 = std::clamp(int(std::lround(b.x)), 0, W);
      const int y0 = std::clamp(int(std::lround(b.y)), 0, H);
      const int x1 = std::clamp(int(std::lround(b.x + b.w)), 0, W);
      const int y1 = std::clamp(int(std::lround(b.y + b.h)), 0, H);
      const Rgb color = kLayoutColors[b.category % 9];
      for (int i = y0; i < y1; ++i)
        for (int j = x0; j < x1; ++j) {
          const bool border = i < y0 + 2 || i >= y1 - 2 || j < x0 + 2 ||
                              j >= x1 - 2;
          if (!border) continue;
          out.at({t, 0, i, j}) = color.r;
          out.at({t, 1, i, j}) = color.g;
          out.at({t, 2, i, j}) = color.b;
        }
    }
  return out;
}

// ---- shard files ------------------------------------------------------------

namespace {

constexpr char kShardMagic[] = "MMKDSHRD";
constexpr std::uint32_t kShardVersion = 1;

enum : std::uint8_t {
  kTagAppearance = 0,
  kTagFlow = 1,
  kTagLayout = 2,
  kTagSpectro = 3,
};

void put_tensor_block(std::vector<std::uint8_t>& out, std::uint8_t tag,
                      const TensorF& t) {
  io::put_u8(out, tag);
  io::put_u8(out, 0);  // dtype: f32
  io::put_u8(out, static_cast<std::uint8_t>(t.ndim()));
  for (auto d : t.shape()) io::put_u32(out, static_cast<std::uint32_t>(d));
  io::put_f32s(out, t.data(), static_cast<std::size_t>(t.numel()));
}

TensorF read_tensor_block(io::Reader& r, std::uint8_t expect_tag) {
  const std::uint8_t tag = r.u8();
  if (tag != expect_tag)
    throw IoError("shard record: expected modality tag " +
                  std::to_string(expect_tag) + ", found " +
                  std::to_string(tag));
  if (r.u8() != 0) throw IoError("shard record: unsupported dtype");
  const int ndim = r.u8();
  Shape shape(ndim);
  for (int i = 0; i < ndim; ++i) shape[i] = r.u32();
  TensorF t(shape);
  r.f32s(t.data(), static_cast<std::size_t>(t.numel()));
  return t;
}

}  // namespace

std::vector<std::uint8_t> encode_shard(const Shard& shard) {
  nlohmann::json header;
  header["config"] = shard.config;
  header["count"] = shard.examples.size();
  header["split"] = shard.split;
  const std::string hjson = header.dump();

  std::vector<std::uint8_t> out;
  io::put_bytes(out, kShardMagic, 8);
  io::put_u32(out, kShardVersion);
  io::put_u32(out, static_cast<std::uint32_t>(hjson.size()));
  io::put_bytes(out, hjson.data(), hjson.size());

  for (const MultimodalExample& ex : shard.examples) {
    io::put_u64(out, ex.id);
    io::put_u16(out, static_cast<std::uint16_t>(ex.noun));
    io::put_u16(out, static_cast<std::uint16_t>(ex.verb));
    io::put_u16(out, static_cast<std::uint16_t>(ex.action));
    put_tensor_block(out, kTagAppearance, ex.appearance);
    put_tensor_block(out, kTagFlow, ex.flow);
    io::put_u8(out, kTagLayout);
    io::put_u16(out, static_cast<std::uint16_t>(ex.layout.size()));
    for (const auto& frame : ex.layout) {
      io::put_u8(out, static_cast<std::uint8_t>(frame.size()));
      for (const LayoutBox& b : frame) {
        io::put_f32(out, b.x);
        io::put_f32(out, b.y);
        io::put_f32(out, b.w);
        io::put_f32(out, b.h);
        io::put_u8(out, b.category);
      }
    }
    put_tensor_block(out, kTagSpectro, ex.spectro);
  }
  return out;
}

Shard decode_shard(const std::vector<std::uint8_t>& buf) {
  io::Reader r(buf);
  if (r.bytes_as_string(8) != std::string(kShardMagic, 8))
    throw IoError("not a shard file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kShardVersion)
    throw IoError("unsupported shard version " + std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes_as_string(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("shard header is not valid JSON: ") + e.what());
  }

  Shard shard;
  shard.config = header.at("config").get<DatasetConfig>();
  shard.split = header.value("split", "");
  const auto count = header.at("count").get<std::size_t>();
  shard.examples.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    MultimodalExample ex;
    ex.id = r.u64();
    ex.noun = r.u16();
    ex.verb = r.u16();
    ex.action = r.u16();
    ex.appearance = read_tensor_block(r, kTagAppearance);
    ex.flow = read_tensor_block(r, kTagFlow);
    if (r.u8() != kTagLayout)
      throw IoError("shard record: expected layout block");
    ex.layout.resize(r.u16());
    for (auto& frame : ex.layout) {
      frame.resize(r.u8());
      for (LayoutBox& b : frame) {
        b.x = r.f32();
        b.y = r.f32();
        b.w = r.f32();
        b.h = r.f32();
        b.category = r.u8();
      }
    }
    ex.spectro = read_tensor_block(r, kTagSpectro);
    shard.examples.push_back(std::move(ex));
  }
  if (!r.at_end())
    throw IoError("shard file has " + std::to_string(r.remaining()) +
                  " trailing bytes");
  return shard;
}

void save_shard(const std::filesystem::path& path, const Shard& shard) {
  io::write_file(path, encode_shard(shard));
}

Shard load_shard(const std::filesystem::path& path) {
  return decode_shard(io::read_file(path));
}

}  // namespace mmkd
