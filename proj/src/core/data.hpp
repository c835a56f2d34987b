#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace xs {

/// Rectified left (visible, 3 channels) and right (near-infrared, replicated to
/// 3 channels) views, all values in [0, 1].
struct SpectralPair {
  std::string id;
  Tensorf left_vis;   // 1x3xHxW
  Tensorf right_nir;  // 1x3xHxW
  // Optional ground truth for the left view, in pixels.
  Tensorf gt_disparity;  // 1x1xHxW or undefined
  Tensorf gt_right;      // right-view ground truth (synthetic only)
  // Pixels whose ground truth is usable for evaluation (in bounds, unoccluded).
  Tensorf eval_mask;
  // Named evaluation regions (subsets of eval_mask or occlusion bookkeeping).
  std::vector<std::pair<std::string, Tensorf>> regions;

  int height() const { return left_vis.shape().h; }
  int width() const { return left_vis.shape().w; }
  bool has_ground_truth() const { return gt_disparity.defined(); }
  const Tensorf* region(const std::string& name) const;
};

/// Per-pixel appearance change from the visible to the NIR band: channel mix,
/// clamp, per-channel gamma, then a highlight boost above a threshold.
struct SpectralTransform {
  std::array<std::array<double, 3>, 3> mix{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  std::array<double, 3> gamma{1, 1, 1};
  double highlight_threshold = 1.0;
  double highlight_gain = 0.0;

  static SpectralTransform identity();
  // The default VIS->NIR imitation: gray output, negative blue weight,
  // compressive gamma and a hard highlight boost.
  static SpectralTransform cross_spectral();

  bool is_identity() const;
  void validate() const;  // mixing rows must sum to 1
  std::array<double, 3> apply(const std::array<double, 3>& rgb) const;
};

struct SyntheticSceneSpec {
  std::uint64_t texture_seed = 0;
  // Integer disparities, back to front. Layer 0 fills the frame; later layers
  // are nearer and must have strictly larger disparities.
  std::vector<int> layer_disparities{0};
  int max_disparity = 16;
  SpectralTransform transform;

  int layer_count() const { return static_cast<int>(layer_disparities.size()); }
  void validate(int width) const;
};

/// Draws a scene: layer count in [1, max_layers], disparities in
/// [min_disp, max_disp] spaced at least 2 px apart.
SyntheticSceneSpec random_scene_spec(std::uint64_t seed, int max_layers, int min_disp,
                                     int max_disp, const SpectralTransform& transform);

/// Renders a layered random-texture scene with exact ground truth. Regions:
/// "occluded" (left pixels hidden in the right view), "border" (match falls
/// outside the right image), "highlight" (boosted NIR), "common" (the rest).
SpectralPair generate_synthetic(const SyntheticSceneSpec& spec, int height, int width,
                                const std::string& id = "synthetic");

/// Reads two 8-bit rasters; values scaled to [0, 1]; gray inputs replicated
/// to 3 channels.
SpectralPair load_pair(const std::string& left_path, const std::string& right_path,
                       const std::string& gt_path = {});

// 16-bit disparity rasters: value = round(d * 256), 0 = no data. Valid
// disparities below 1/256 px are stored as 1.
void save_disparity(const std::string& path, const Tensorf& disparity, const Tensorf& valid);
std::pair<Tensorf, Tensorf> load_disparity(const std::string& path);  // (disparity, valid)

void save_image(const std::string& path, const Tensorf& image);  // 1 or 3 channels, 8-bit
Tensorf load_image(const std::string& path, bool force_rgb = true);

struct ManifestEntry {
  std::string left;
  std::string right;
  std::string gt;  // empty when absent
};

// "left<TAB>right[<TAB>gt]" per line; relative paths resolve against the
// manifest's directory. Blank lines and '#' comments are skipped.
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<SpectralPair> load_dataset(const std::string& manifest_path);

/// Writes <dir>/<id>_left.png, _right.png, _gt.png (when present) and returns
/// the manifest entry (paths relative to dir).
ManifestEntry save_pair(const SpectralPair& pair, const std::string& dir);

Tensorf flip_horizontal(const Tensorf& image);

/// Mirrors both views with the given probability. Exactly one draw from rng is
/// consumed per call. Only meant for the unpaired translation stream.
SpectralPair augment_flip(const SpectralPair& pair, double probability, std::mt19937_64& rng);

/// Bilinear resize of both views; ground truth is resampled and its values
/// scaled by the width ratio.
SpectralPair resize_pair(const SpectralPair& pair, int height, int width);

enum class InputMode { concat, ori };

inline constexpr float kInputNormEps = 1e-5f;

struct SmnInputs {
  Tensorf left;
  Tensorf right;
};

/// Builds the stereo network's inputs from original views and (detached)
/// translations: concat mode stacks {left, G_B(F(left))} and
/// {G_A(F(right)), right}; ori mode uses the originals. Each channel is
/// instance-normalised; inputs are resized to (height, width) first.
SmnInputs prepare_smn_inputs(const Tensorf& left_vis, const Tensorf& right_nir,
                             const Tensorf& fake_nir_left, const Tensorf& fake_vis_right,
                             InputMode mode, int height, int width);

/// Stacks 1xCxHxW tensors into a batch.
Tensorf stack_batch(const std::vector<Tensorf>& items);

}  // namespace xs
