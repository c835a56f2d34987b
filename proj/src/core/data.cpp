#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "image_io.hpp"

namespace xs {

namespace fs = std::filesystem;

const Tensorf* SpectralPair::region(const std::string& name) const {
  for (const auto& [n, mask] : regions) {
    if (n == name) return &mask;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Spectral transform

SpectralTransform SpectralTransform::identity() { return {}; }

SpectralTransform SpectralTransform::cross_spectral() {
  SpectralTransform t;
  const std::array<double, 3> row{0.8, 0.8, -0.6};
  t.mix = {row, row, row};
  t.gamma = {0.6, 0.6, 0.6};
  t.highlight_threshold = 0.75;
  t.highlight_gain = 2.5;
  return t;
}

bool SpectralTransform::is_identity() const {
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (mix[i][j] != (i == j ? 1.0 : 0.0)) return false;
    }
    if (gamma[i] != 1.0) return false;
  }
  return highlight_gain == 0.0 || highlight_threshold >= 1.0;
}

void SpectralTransform::validate() const {
  for (const auto& row : mix) {
    const double s = row[0] + row[1] + row[2];
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("mixing matrix rows must sum to 1");
  }
  for (double g : gamma) {
    if (!(g > 0)) throw std::invalid_argument("gamma must be positive");
  }
  if (highlight_gain < 0) throw std::invalid_argument("highlight gain must be non-negative");
}

std::array<double, 3> SpectralTransform::apply(const std::array<double, 3>& rgb) const {
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i) {
    double v = mix[i][0] * rgb[0] + mix[i][1] * rgb[1] + mix[i][2] * rgb[2];
    v = std::clamp(v, 0.0, 1.0);
    v = std::pow(v, gamma[i]);
    if (v > highlight_threshold) v = std::min(1.0, v + highlight_gain * (v - highlight_threshold));
    out[i] = v;
  }
  return out;
}

void SyntheticSceneSpec::validate(int width) const {
  if (layer_disparities.empty()) throw std::invalid_argument("scene needs at least one layer");
  if (max_disparity < 0 || max_disparity >= width) {
    throw std::invalid_argument("max_disparity " + std::to_string(max_disparity) +
                                " must lie in [0, width)");
  }
  int prev = -1;
  for (int d : layer_disparities) {
    if (d < 0 || d > max_disparity) {
      throw std::invalid_argument("layer disparity " + std::to_string(d) +
                                  " exceeds [0, max_disparity]");
    }
    if (d <= prev) throw std::invalid_argument("layer disparities must increase front-wards");
    prev = d;
  }
  transform.validate();
}

SyntheticSceneSpec random_scene_spec(std::uint64_t seed, int max_layers, int min_disp,
                                     int max_disp, const SpectralTransform& transform) {
  if (max_layers < 1 || min_disp < 0 || max_disp < min_disp) {
    throw std::invalid_argument("random_scene_spec: invalid ranges");
  }
  std::mt19937_64 rng(seed);
  SyntheticSceneSpec spec;
  spec.texture_seed = rng();
  spec.max_disparity = max_disp;
  spec.transform = transform;
  const int possible = (max_disp - min_disp) / 2 + 1;
  const int layers = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(
                                              std::min(max_layers, possible)));
  // Pick increasing disparities with gaps >= 2.
  std::vector<int> picks;
  const int slack = (max_disp - min_disp) - 2 * (layers - 1);
  std::vector<int> extra(layers, 0);
  int remaining = slack;
  for (int i = 0; i < layers; ++i) {
    const int e = static_cast<int>(rng() % static_cast<std::uint64_t>(remaining + 1));
    extra[i] = e;
    remaining -= e;
  }
  int d = min_disp;
  for (int i = 0; i < layers; ++i) {
    d += extra[i];
    picks.push_back(d);
    d += 2;
  }
  spec.layer_disparities = picks;
  return spec;
}

// ---------------------------------------------------------------------------
// Scene rendering

namespace {

struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

Plane value_noise(std::mt19937_64& rng, int h, int w, int cell) {
  const int gh = h / cell + 2, gw = w / cell + 2;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> grid(static_cast<std::size_t>(gh) * gw);
  for (double& g : grid) g = u(rng);
  Plane p{h, w, std::vector<double>(static_cast<std::size_t>(h) * w)};
  for (int y = 0; y < h; ++y) {
    const double fy = static_cast<double>(y) / cell;
    const int y0 = static_cast<int>(fy);
    const double ty = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x) / cell;
      const int x0 = static_cast<int>(fx);
      const double tx = fx - x0;
      const double a = grid[y0 * gw + x0], b = grid[y0 * gw + x0 + 1];
      const double c = grid[(y0 + 1) * gw + x0], d = grid[(y0 + 1) * gw + x0 + 1];
      p.v[static_cast<std::size_t>(y) * w + x] =
          (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    }
  }
  return p;
}

struct Layer {
  int disparity = 0;
  bool full = true;
  bool ellipse = false;
  double cx = 0, cy = 0, rx = 0, ry = 0;
  std::array<Plane, 3> rgb;  // in left-view coordinates, width W + disparity

  bool covers(double x, double y) const {
    if (full) return true;
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    if (ellipse) return dx * dx + dy * dy <= 1.0;
    return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
  }
};

Layer make_layer(std::mt19937_64& rng, int index, int disparity, int h, int w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Layer layer;
  layer.disparity = disparity;
  layer.full = index == 0;
  if (!layer.full) {
    layer.ellipse = u(rng) < 0.5;
    layer.cx = w * (0.25 + 0.5 * u(rng));
    layer.cy = h * (0.25 + 0.5 * u(rng));
    layer.rx = w * (0.15 + 0.15 * u(rng));
    layer.ry = h * (0.15 + 0.15 * u(rng));
  }
  const int cw = w + disparity;
  const std::array<double, 3> base{0.25 + 0.5 * u(rng), 0.25 + 0.5 * u(rng),
                                   0.25 + 0.5 * u(rng)};
  const Plane coarse = value_noise(rng, h, cw, 12);
  const Plane mid = value_noise(rng, h, cw, 5);
  const Plane fine = value_noise(rng, h, cw, 2);
  std::array<Plane, 3> chroma;
  for (auto& c : chroma) c = value_noise(rng, h, cw, 7);
  for (int c = 0; c < 3; ++c) {
    Plane& out = layer.rgb[c];
    out = Plane{h, cw, std::vector<double>(static_cast<std::size_t>(h) * cw)};
    for (std::size_t i = 0; i < out.v.size(); ++i) {
      const double lum = 0.35 * coarse.v[i] + 0.3 * mid.v[i] + 0.35 * fine.v[i];
      const double value = base[c] + 1.1 * (lum - 0.5) + 0.45 * (chroma[c].v[i] - 0.5);
      out.v[i] = std::clamp(value, 0.0, 1.0);
    }
  }
  return layer;
}

Tensorf plane_tensor(int h, int w, std::vector<float> v) {
  return Tensorf::from_data(Shape{1, 1, h, w}, std::move(v));
}

}  // namespace

SpectralPair generate_synthetic(const SyntheticSceneSpec& spec, int height, int width,
                                const std::string& id) {
  if (height < 1 || width < 2) throw std::invalid_argument("generate_synthetic: bad size");
  spec.validate(width);
  std::mt19937_64 rng(spec.texture_seed);
  std::vector<Layer> layers;
  for (int i = 0; i < spec.layer_count(); ++i) {
    layers.push_back(make_layer(rng, i, spec.layer_disparities[i], height, width));
  }
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<float> left(3 * plane), right(3 * plane);
  std::vector<int> left_layer(plane), right_layer(plane);
  auto top_layer = [&](double lx, int y) {
    for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
      if (layers[i].covers(lx, y)) return i;
    }
    return 0;
  };
  const bool identity = spec.transform.is_identity();
  std::vector<float> highlight(plane, 0.0f);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * width + x;
      const int li = top_layer(x, y);
      left_layer[p] = li;
      std::array<double, 3> rgb{};
      for (int c = 0; c < 3; ++c) {
        rgb[c] = layers[li].rgb[c].at(y, x);
        left[c * plane + p] = static_cast<float>(rgb[c]);
      }
      if (!identity && spec.transform.highlight_gain > 0) {
        const auto nir = spec.transform.apply(rgb);
        if (std::max({nir[0], nir[1], nir[2]}) > spec.transform.highlight_threshold) {
          highlight[p] = 1.0f;
        }
      }
      // Right view: the nearest layer whose footprint, shifted by its
      // disparity, covers this pixel.
      int ri = 0;
      for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
        if (layers[i].covers(x + layers[i].disparity, y)) {
          ri = i;
          break;
        }
      }
      right_layer[p] = ri;
      std::array<double, 3> src{};
      for (int c = 0; c < 3; ++c) src[c] = layers[ri].rgb[c].at(y, x + layers[ri].disparity);
      const auto out = identity ? src : spec.transform.apply(src);
      for (int c = 0; c < 3; ++c) right[c * plane + p] = static_cast<float>(out[c]);
    }
  }

  std::vector<float> gt_l(plane), gt_r(plane), occluded(plane, 0.0f), border(plane, 0.0f),
      valid(plane, 0.0f), common(plane, 0.0f), hl(plane, 0.0f);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * width + x;
      const int d = layers[left_layer[p]].disparity;
      gt_l[p] = static_cast<float>(d);
      gt_r[p] = static_cast<float>(layers[right_layer[p]].disparity);
      const int xr = x - d;
      if (xr < 0) {
        border[p] = 1.0f;
      } else if (right_layer[static_cast<std::size_t>(y) * width + xr] != left_layer[p]) {
        occluded[p] = 1.0f;
      } else {
        valid[p] = 1.0f;
        if (highlight[p] > 0) {
          hl[p] = 1.0f;
        } else {
          common[p] = 1.0f;
        }
      }
    }
  }

  SpectralPair pair;
  pair.id = id;
  pair.left_vis = Tensorf::from_data(Shape{1, 3, height, width}, std::move(left));
  pair.right_nir = Tensorf::from_data(Shape{1, 3, height, width}, std::move(right));
  pair.gt_disparity = plane_tensor(height, width, std::move(gt_l));
  pair.gt_right = plane_tensor(height, width, std::move(gt_r));
  pair.eval_mask = plane_tensor(height, width, std::move(valid));
  pair.regions.emplace_back("common", plane_tensor(height, width, std::move(common)));
  pair.regions.emplace_back("highlight", plane_tensor(height, width, std::move(hl)));
  pair.regions.emplace_back("occluded", plane_tensor(height, width, std::move(occluded)));
  pair.regions.emplace_back("border", plane_tensor(height, width, std::move(border)));
  return pair;
}

// ---------------------------------------------------------------------------
// Files

namespace {

Tensorf raster_to_tensor(const Raster& r, bool force_rgb, const std::string& path) {
  if (r.channels != 1 && r.channels != 3) {
    throw IoError(path + ": unsupported channel count " + std::to_string(r.channels));
  }
  const int out_c = force_rgb ? 3 : r.channels;
  const double scale = r.bit_depth == 16 ? 65535.0 : 255.0;
  const std::size_t plane = static_cast<std::size_t>(r.width) * r.height;
  std::vector<float> v(out_c * plane);
  for (int c = 0; c < out_c; ++c) {
    const int src_c = r.channels == 1 ? 0 : c;
    for (std::size_t p = 0; p < plane; ++p) {
      v[c * plane + p] = static_cast<float>(r.samples[p * r.channels + src_c] / scale);
    }
  }
  return Tensorf::from_data(Shape{1, out_c, r.height, r.width}, std::move(v));
}

std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  return path.is_absolute() ? p : (base / path).string();
}

}  // namespace

Tensorf load_image(const std::string& path, bool force_rgb) {
  return raster_to_tensor(read_png(path), force_rgb, path);
}

void save_image(const std::string& path, const Tensorf& image) {
  const Shape s = image.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) {
    throw IoError("save_image: expected 1x1xHxW or 1x3xHxW, got " + s.str());
  }
  Raster r;
  r.width = s.w;
  r.height = s.h;
  r.channels = s.c;
  r.bit_depth = 8;
  r.samples.resize(s.numel());
  const std::size_t plane = s.plane();
  for (int c = 0; c < s.c; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double v = std::clamp(static_cast<double>(image.data()[c * plane + p]), 0.0, 1.0);
      r.samples[p * s.c + c] = static_cast<std::uint16_t>(std::lround(v * 255.0));
    }
  }
  write_png(path, r);
}

void save_disparity(const std::string& path, const Tensorf& disparity, const Tensorf& valid) {
  const Shape s = disparity.shape();
  if (s.n != 1 || s.c != 1) throw IoError("save_disparity: expected 1x1xHxW, got " + s.str());
  Raster r;
  r.width = s.w;
  r.height = s.h;
  r.channels = 1;
  r.bit_depth = 16;
  r.samples.resize(s.numel());
  for (std::size_t p = 0; p < s.numel(); ++p) {
    const bool ok = !valid.defined() || valid.data()[p] > 0;
    if (!ok) {
      r.samples[p] = 0;
      continue;
    }
    const double code = std::clamp(std::round(disparity.data()[p] * 256.0), 1.0, 65535.0);
    r.samples[p] = static_cast<std::uint16_t>(code);
  }
  write_png(path, r);
}

std::pair<Tensorf, Tensorf> load_disparity(const std::string& path) {
  const Raster r = read_png(path);
  if (r.channels != 1 || r.bit_depth != 16) {
    throw IoError(path + ": disparity rasters must be 16-bit single channel");
  }
  const std::size_t n = static_cast<std::size_t>(r.width) * r.height;
  std::vector<float> d(n), valid(n);
  for (std::size_t p = 0; p < n; ++p) {
    d[p] = static_cast<float>(r.samples[p] / 256.0);
    valid[p] = r.samples[p] == 0 ? 0.0f : 1.0f;
  }
  const Shape s{1, 1, r.height, r.width};
  return {Tensorf::from_data(s, std::move(d)), Tensorf::from_data(s, std::move(valid))};
}

SpectralPair load_pair(const std::string& left_path, const std::string& right_path,
                       const std::string& gt_path) {
  SpectralPair pair;
  pair.id = fs::path(left_path).stem().string();
  pair.left_vis = load_image(left_path, true);
  pair.right_nir = load_image(right_path, true);
  if (!(pair.left_vis.shape() == pair.right_nir.shape())) {
    throw IoError("dimension mismatch: " + left_path + " is " + pair.left_vis.shape().str() +
                  ", " + right_path + " is " + pair.right_nir.shape().str());
  }
  if (!gt_path.empty()) {
    auto [gt, valid] = load_disparity(gt_path);
    if (gt.shape().h != pair.height() || gt.shape().w != pair.width()) {
      throw IoError("dimension mismatch: ground truth " + gt_path + " is " + gt.shape().str());
    }
    pair.gt_disparity = gt;
    pair.eval_mask = valid;
    pair.regions.emplace_back("common", valid);
  }
  return pair;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() < 2 || cols.size() > 3) {
      throw IoError(path + ":" + std::to_string(line_no) +
                    ": expected left<TAB>right[<TAB>gt]");
    }
    entries.push_back({resolve(base, cols[0]), resolve(base, cols[1]),
                       cols.size() == 3 ? resolve(base, cols[2]) : std::string()});
  }
  if (entries.empty()) throw IoError("manifest " + path + " lists no pairs");
  return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path);
  for (const auto& e : entries) {
    out << e.left << '\t' << e.right;
    if (!e.gt.empty()) out << '\t' << e.gt;
    out << '\n';
  }
}

std::vector<SpectralPair> load_dataset(const std::string& manifest_path) {
  std::vector<SpectralPair> pairs;
  for (const auto& e : read_manifest(manifest_path)) {
    pairs.push_back(load_pair(e.left, e.right, e.gt));
  }
  return pairs;
}

ManifestEntry save_pair(const SpectralPair& pair, const std::string& dir) {
  fs::create_directories(dir);
  ManifestEntry e{pair.id + "_left.png", pair.id + "_right.png", {}};
  save_image((fs::path(dir) / e.left).string(), pair.left_vis);
  save_image((fs::path(dir) / e.right).string(), pair.right_nir);
  if (pair.has_ground_truth()) {
    e.gt = pair.id + "_gt.png";
    save_disparity((fs::path(dir) / e.gt).string(), pair.gt_disparity, pair.eval_mask);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Augmentation and preparation

Tensorf flip_horizontal(const Tensorf& image) {
  const Shape s = image.shape();
  std::vector<float> out(image.numel());
  const auto& in = image.data();
  const std::size_t rows = static_cast<std::size_t>(s.n) * s.c * s.h;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* src = in.data() + r * s.w;
    float* dst = out.data() + r * s.w;
    for (int x = 0; x < s.w; ++x) dst[x] = src[s.w - 1 - x];
  }
  return Tensorf::from_data(s, std::move(out));
}

SpectralPair augment_flip(const SpectralPair& pair, double probability, std::mt19937_64& rng) {
  if (probability < 0 || probability > 1) {
    throw std::invalid_argument("flip probability must lie in [0, 1]");
  }
  const double draw = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (!(draw < probability)) return pair;
  SpectralPair out = pair;
  out.left_vis = flip_horizontal(pair.left_vis);
  out.right_nir = flip_horizontal(pair.right_nir);
  return out;
}

SpectralPair resize_pair(const SpectralPair& pair, int height, int width) {
  if (pair.height() == height && pair.width() == width) return pair;
  NoGradGuard no_grad;
  SpectralPair out;
  out.id = pair.id;
  out.left_vis = upsample_bilinear(pair.left_vis, height, width);
  out.right_nir = upsample_bilinear(pair.right_nir, height, width);
  const float ratio = static_cast<float>(width) / static_cast<float>(pair.width());
  auto resize_mask = [&](const Tensorf& m) {
    Tensorf r = upsample_bilinear(m, height, width);
    for (float& v : r.mutable_data()) v = v >= 0.999f ? 1.0f : 0.0f;
    return r;
  };
  if (pair.gt_disparity.defined()) {
    out.gt_disparity = mul_scalar(upsample_bilinear(pair.gt_disparity, height, width), ratio);
  }
  if (pair.gt_right.defined()) {
    out.gt_right = mul_scalar(upsample_bilinear(pair.gt_right, height, width), ratio);
  }
  if (pair.eval_mask.defined()) out.eval_mask = resize_mask(pair.eval_mask);
  for (const auto& [name, mask] : pair.regions) out.regions.emplace_back(name, resize_mask(mask));
  return out;
}

SmnInputs prepare_smn_inputs(const Tensorf& left_vis, const Tensorf& right_nir,
                             const Tensorf& fake_nir_left, const Tensorf& fake_vis_right,
                             InputMode mode, int height, int width) {
  NoGradGuard no_grad;
  auto fit = [&](const Tensorf& t) {
    const Shape s = t.shape();
    return (s.h == height && s.w == width) ? t.detach() : upsample_bilinear(t.detach(), height, width);
  };
  Tensorf left, right;
  if (mode == InputMode::concat) {
    if (!fake_nir_left.defined() || !fake_vis_right.defined()) {
      throw std::invalid_argument("prepare_smn_inputs: concat mode needs translated images");
    }
    left = concat_channels<float>({fit(left_vis), fit(fake_nir_left)});
    right = concat_channels<float>({fit(fake_vis_right), fit(right_nir)});
  } else {
    left = fit(left_vis);
    right = fit(right_nir);
  }
  return {instance_norm(left, kInputNormEps), instance_norm(right, kInputNormEps)};
}

Tensorf stack_batch(const std::vector<Tensorf>& items) {
  if (items.empty()) throw std::invalid_argument("stack_batch: empty batch");
  const Shape s = items.front().shape();
  std::vector<float> out;
  out.reserve(items.size() * s.numel());
  for (const auto& t : items) {
    const Shape ts = t.shape();
    if (ts.c != s.c || ts.h != s.h || ts.w != s.w) {
      throw ShapeError("stack_batch: shape mismatch " + s.str() + " vs " + ts.str());
    }
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  int n = 0;
  for (const auto& t : items) n += t.shape().n;
  return Tensorf::from_data(Shape{n, s.c, s.h, s.w}, std::move(out));
}

}  // namespace xs
