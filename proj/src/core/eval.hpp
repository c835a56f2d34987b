#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"
#include "data.hpp"
#include "networks.hpp"

namespace xs {

/// sqrt(masked mean of (pred - gt)^2). Throws std::invalid_argument on an
/// empty mask or mismatched shapes.
double rmse(const Tensorf& pred, const Tensorf& gt, const Tensorf& mask);
double mean_abs_error(const Tensorf& pred, const Tensorf& gt, const Tensorf& mask);

/// Bilinear upsample to (height, width), values scaled by width / pred width.
Tensorf upscale_prediction(const Tensorf& pred, int height, int width);

/// Exhaustive SAD block matching for the left view: window x window box,
/// disparities 0..max_disparity, costs summed over channels and averaged over
/// the in-bounds part of the window. Ties go to the smaller disparity.
Tensorf block_match_sad(const Tensorf& left, const Tensorf& right, int max_disparity,
                        int window = 9);

struct RegionScore {
  std::string name;
  double rmse = 0;
  std::size_t pixels = 0;
};

struct PairScore {
  std::string id;
  double rmse = 0;
  double mean_abs_error = 0;
  double coverage = 0;  // evaluated pixels / all pixels
  std::vector<RegionScore> regions;
};

struct EvalReport {
  double rmse_overall = 0;    // pooled over every evaluated pixel
  double mean_abs_error = 0;  // pooled
  double coverage = 0;
  std::vector<RegionScore> rmse_per_region;  // pooled per region name
  double region_mean = 0;  // unweighted mean of the region RMSEs
  std::vector<PairScore> pairs;
};

/// Scores predictions (at pair size) against each pair's ground truth and
/// eval_mask. Pairs without ground truth are rejected.
EvalReport evaluate_predictions(const std::vector<SpectralPair>& pairs,
                                const std::vector<Tensorf>& predictions);

/// Tab-separated: header, one row per pair, then an "ALL" row.
std::string report_tsv(const EvalReport& report);

/// Monotone ramp of increasing luminance, black -> purple -> orange -> pale
/// yellow, over [0, max_value]; values outside are clamped.
std::array<std::uint8_t, 3> colorize(double value, double max_value);
Tensorf colorize_disparity(const Tensorf& disparity, double max_value);

struct TranslatedViews {
  Tensorf fake_nir_left;   // undefined without a translator
  Tensorf fake_vis_right;
};

/// Writes <id>_left_vis, _fake_nir, _right_nir, _fake_vis, _disparity and
/// _error PNGs into out_dir (missing translations are written as black
/// frames; the error map is black where there is no ground truth). Returns
/// the paths in that order.
std::vector<std::string> emit_diagnostics(const SpectralPair& pair, const TranslatedViews& stn,
                                          const Tensorf& prediction, double max_disparity,
                                          const std::string& out_dir);

struct ModelOutputs {
  Tensorf prediction;  // at the pair's original size
  TranslatedViews views;
};

/// Resizes to the network size, predicts, translates and upscales back.
ModelOutputs run_model(const Networks& nets, const TrainConfig& config, const SpectralPair& pair);

}  // namespace xs
