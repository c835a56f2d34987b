#include "eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <stdexcept>

#include "image_io.hpp"
#include "schedule.hpp"

namespace xs {

namespace fs = std::filesystem;

namespace {

void check_metric_args(const Tensorf& pred, const Tensorf& gt, const Tensorf& mask) {
  if (!(pred.shape() == gt.shape()) || !(pred.shape() == mask.shape())) {
    throw std::invalid_argument("metric: shapes differ: pred " + pred.shape().str() + ", gt " +
                                gt.shape().str() + ", mask " + mask.shape().str());
  }
}

struct Accum {
  double sq = 0, abs = 0;
  std::size_t n = 0;
  void add(double e) {
    sq += e * e;
    abs += std::abs(e);
    ++n;
  }
  double rmse() const { return std::sqrt(sq / static_cast<double>(n)); }
};

Accum accumulate(const Tensorf& pred, const Tensorf& gt, const Tensorf& mask) {
  check_metric_args(pred, gt, mask);
  Accum a;
  const auto p = pred.data(), g = gt.data(), m = mask.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m[i] > 0) a.add(static_cast<double>(p[i]) - g[i]);
  }
  return a;
}

}  // namespace

double rmse(const Tensorf& pred, const Tensorf& gt, const Tensorf& mask) {
  const Accum a = accumulate(pred, gt, mask);
  if (a.n == 0) throw std::invalid_argument("rmse: empty mask");
  return a.rmse();
}

double mean_abs_error(const Tensorf& pred, const Tensorf& gt, const Tensorf& mask) {
  const Accum a = accumulate(pred, gt, mask);
  if (a.n == 0) throw std::invalid_argument("mean_abs_error: empty mask");
  return a.abs / static_cast<double>(a.n);
}

Tensorf upscale_prediction(const Tensorf& pred, int height, int width) {
  NoGradGuard no_grad;
  const Shape s = pred.shape();
  if (s.h == height && s.w == width) return pred.detach();
  const float scale = static_cast<float>(width) / static_cast<float>(s.w);
  return mul_scalar(upsample_bilinear(pred.detach(), height, width), scale);
}

Tensorf block_match_sad(const Tensorf& left, const Tensorf& right, int max_disparity,
                        int window) {
  const Shape s = left.shape();
  if (!(s == right.shape()) || s.n != 1) {
    throw std::invalid_argument("block_match_sad: expected two 1xCxHxW images of equal shape");
  }
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("block_match_sad: odd window");
  if (max_disparity < 0) throw std::invalid_argument("block_match_sad: negative range");
  const int h = s.h, w = s.w, r = window / 2;
  const std::size_t plane = s.plane();
  const auto L = left.data(), R = right.data();
  std::vector<double> best(plane, std::numeric_limits<double>::infinity());
  std::vector<float> disp(plane, 0.0f);
  // Integral images of the per-pixel cost and of its validity.
  std::vector<double> ic((h + 1) * static_cast<std::size_t>(w + 1));
  std::vector<double> iv(ic.size());
  for (int d = 0; d <= std::min(max_disparity, w - 1); ++d) {
    std::fill(ic.begin(), ic.end(), 0.0);
    std::fill(iv.begin(), iv.end(), 0.0);
    for (int y = 0; y < h; ++y) {
      double row_c = 0, row_v = 0;
      for (int x = 0; x < w; ++x) {
        if (x - d >= 0) {
          double c = 0;
          for (int ch = 0; ch < s.c; ++ch) {
            const std::size_t base = ch * plane + static_cast<std::size_t>(y) * w;
            c += std::abs(static_cast<double>(L[base + x]) - R[base + x - d]);
          }
          row_c += c;
          row_v += 1;
        }
        const std::size_t o = (y + 1) * static_cast<std::size_t>(w + 1) + x + 1;
        ic[o] = ic[o - (w + 1)] + row_c;
        iv[o] = iv[o - (w + 1)] + row_v;
      }
    }
    auto box = [&](const std::vector<double>& t, int y0, int x0, int y1, int x1) {
      const std::size_t W1 = w + 1;
      return t[y1 * W1 + x1] - t[y0 * W1 + x1] - t[y1 * W1 + x0] + t[y0 * W1 + x0];
    };
    for (int y = 0; y < h; ++y) {
      const int y0 = std::max(0, y - r), y1 = std::min(h, y + r + 1);
      for (int x = d; x < w; ++x) {
        const int x0 = std::max(0, x - r), x1 = std::min(w, x + r + 1);
        const double n = box(iv, y0, x0, y1, x1);
        if (n <= 0) continue;
        const double cost = box(ic, y0, x0, y1, x1) / n;
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        if (cost < best[p]) {
          best[p] = cost;
          disp[p] = static_cast<float>(d);
        }
      }
    }
  }
  return Tensorf::from_data(Shape{1, 1, h, w}, std::move(disp));
}

EvalReport evaluate_predictions(const std::vector<SpectralPair>& pairs,
                                const std::vector<Tensorf>& predictions) {
  if (pairs.size() != predictions.size()) {
    throw std::invalid_argument("evaluate_predictions: pair and prediction counts differ");
  }
  if (pairs.empty()) throw std::invalid_argument("evaluate_predictions: nothing to evaluate");
  EvalReport report;
  Accum overall;
  std::size_t total_pixels = 0;
  std::vector<std::string> region_order;
  std::map<std::string, Accum> region_acc;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const SpectralPair& pair = pairs[i];
    if (!pair.has_ground_truth()) {
      throw std::invalid_argument("evaluate_predictions: pair " + pair.id + " has no ground truth");
    }
    const Accum a = accumulate(predictions[i], pair.gt_disparity, pair.eval_mask);
    if (a.n == 0) {
      throw std::invalid_argument("evaluate_predictions: pair " + pair.id +
                                  " has an empty evaluation mask");
    }
    PairScore ps;
    ps.id = pair.id;
    ps.rmse = a.rmse();
    ps.mean_abs_error = a.abs / static_cast<double>(a.n);
    ps.coverage = static_cast<double>(a.n) / static_cast<double>(pair.eval_mask.numel());
    overall.sq += a.sq;
    overall.abs += a.abs;
    overall.n += a.n;
    total_pixels += pair.eval_mask.numel();
    for (const auto& [name, mask] : pair.regions) {
      const Accum ra = accumulate(predictions[i], pair.gt_disparity, mask);
      if (ra.n == 0) continue;
      ps.regions.push_back({name, ra.rmse(), ra.n});
      if (!region_acc.count(name)) region_order.push_back(name);
      Accum& acc = region_acc[name];
      acc.sq += ra.sq;
      acc.abs += ra.abs;
      acc.n += ra.n;
    }
    report.pairs.push_back(std::move(ps));
  }
  report.rmse_overall = overall.rmse();
  report.mean_abs_error = overall.abs / static_cast<double>(overall.n);
  report.coverage = static_cast<double>(overall.n) / static_cast<double>(total_pixels);
  double sum = 0;
  for (const auto& name : region_order) {
    const Accum& acc = region_acc[name];
    report.rmse_per_region.push_back({name, acc.rmse(), acc.n});
    sum += acc.rmse();
  }
  report.region_mean = region_order.empty() ? report.rmse_overall
                                            : sum / static_cast<double>(region_order.size());
  return report;
}

std::string report_tsv(const EvalReport& report) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  std::string out = "id\trmse\tmean_abs_error\tcoverage";
  for (const auto& r : report.rmse_per_region) out += "\trmse_" + r.name;
  out += "\tregion_mean\n";
  for (const auto& p : report.pairs) {
    out += p.id + "\t" + num(p.rmse) + "\t" + num(p.mean_abs_error) + "\t" + num(p.coverage);
    double sum = 0;
    for (const auto& r : report.rmse_per_region) {
      auto it = std::find_if(p.regions.begin(), p.regions.end(),
                             [&](const RegionScore& s) { return s.name == r.name; });
      if (it == p.regions.end()) {
        out += "\t-";
      } else {
        out += "\t" + num(it->rmse);
        sum += it->rmse;
      }
    }
    out += "\t" + (p.regions.empty() ? num(p.rmse) : num(sum / p.regions.size())) + "\n";
  }
  out += "ALL\t" + num(report.rmse_overall) + "\t" + num(report.mean_abs_error) + "\t" +
         num(report.coverage);
  for (const auto& r : report.rmse_per_region) out += "\t" + num(r.rmse);
  out += "\t" + num(report.region_mean) + "\n";
  return out;
}

std::array<std::uint8_t, 3> colorize(double value, double max_value) {
  static constexpr double stops[][3] = {
      {0, 0, 4}, {87, 16, 110}, {188, 55, 84}, {249, 142, 9}, {252, 255, 164}};
  constexpr int segments = 4;
  double t = max_value > 0 ? value / max_value : 0.0;
  if (!(t > 0)) t = 0;  // also maps NaN to the bottom of the ramp
  t = std::min(t, 1.0) * segments;
  const int k = std::min(static_cast<int>(t), segments - 1);
  const double f = t - k;
  std::array<std::uint8_t, 3> rgb{};
  for (int c = 0; c < 3; ++c) {
    rgb[c] = static_cast<std::uint8_t>(
        std::lround(stops[k][c] + f * (stops[k + 1][c] - stops[k][c])));
  }
  return rgb;
}

Tensorf colorize_disparity(const Tensorf& disparity, double max_value) {
  const Shape s = disparity.shape();
  if (s.n != 1 || s.c != 1) {
    throw std::invalid_argument("colorize_disparity: expected 1x1xHxW, got " + s.str());
  }
  const std::size_t plane = s.plane();
  std::vector<float> out(3 * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    const auto rgb = colorize(disparity.data()[p], max_value);
    for (int c = 0; c < 3; ++c) out[c * plane + p] = rgb[c] / 255.0f;
  }
  return Tensorf::from_data(Shape{1, 3, s.h, s.w}, std::move(out));
}

std::vector<std::string> emit_diagnostics(const SpectralPair& pair, const TranslatedViews& stn,
                                          const Tensorf& prediction, double max_disparity,
                                          const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  const Shape img{1, 3, pair.height(), pair.width()};
  auto or_black = [&](const Tensorf& t) {
    if (!t.defined()) return Tensorf::zeros(img);
    if (t.shape().h != img.h || t.shape().w != img.w) {
      NoGradGuard no_grad;
      return upsample_bilinear(t, img.h, img.w);
    }
    return t;
  };
  Tensorf error;
  if (pair.has_ground_truth()) {
    std::vector<float> e(img.plane());
    for (std::size_t p = 0; p < e.size(); ++p) {
      const bool valid = !pair.eval_mask.defined() || pair.eval_mask.data()[p] > 0;
      e[p] = valid ? std::abs(prediction.data()[p] - pair.gt_disparity.data()[p]) : 0.0f;
    }
    // Errors of 3 px and above saturate the ramp.
    error = colorize_disparity(Tensorf::from_data(Shape{1, 1, img.h, img.w}, std::move(e)), 3.0);
  }
  const std::vector<std::pair<std::string, Tensorf>> panels = {
      {"left_vis", pair.left_vis},
      {"fake_nir", or_black(stn.fake_nir_left)},
      {"right_nir", pair.right_nir},
      {"fake_vis", or_black(stn.fake_vis_right)},
      {"disparity", colorize_disparity(prediction, max_disparity)},
      {"error", or_black(error)},
  };
  std::vector<std::string> paths;
  for (const auto& [name, tensor] : panels) {
    const std::string path = (fs::path(out_dir) / (pair.id + "_" + name + ".png")).string();
    save_image(path, tensor);
    paths.push_back(path);
  }
  return paths;
}

ModelOutputs run_model(const Networks& nets, const TrainConfig& config, const SpectralPair& pair) {
  NoGradGuard no_grad;
  const SpectralPair small = resize_pair(pair, config.image_height, config.image_width);
  ModelOutputs out;
  const Tensorf pred = predict_disparity(nets, config, small);
  out.prediction = upscale_prediction(pred, pair.height(), pair.width());
  if (config.use_stn) {
    auto back = [&](const Tensorf& t) {
      return (t.shape().h == pair.height() && t.shape().w == pair.width())
                 ? t
                 : upsample_bilinear(t, pair.height(), pair.width());
    };
    out.views.fake_nir_left = back(nets.to_spectrum_b(small.left_vis));
    out.views.fake_vis_right = back(nets.to_spectrum_a(small.right_nir));
  }
  return out;
}

}  // namespace xs
