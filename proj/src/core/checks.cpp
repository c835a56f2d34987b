#include "checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "data.hpp"
#include "eval.hpp"
#include "losses.hpp"
#include "warp.hpp"

namespace xs {

const std::vector<std::string>& gradient_registry() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n = differentiable_op_names();
    n.push_back("warp_horizontal");
    return n;
  }();
  return names;
}

namespace {

template <typename T>
Tensor<T> uniform(Shape s, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(s.numel());
  for (T& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::from_data(s, std::move(v), true);
}

// |x| in [lo, hi] with random sign.
template <typename T>
Tensor<T> signed_away(Shape s, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<T> v(s.numel());
  for (T& x : v) x = static_cast<T>(sign(rng) ? u(rng) : -u(rng));
  return Tensor<T>::from_data(s, std::move(v), true);
}

// Uniform in [lo, hi] avoiding a margin around each kink.
template <typename T>
Tensor<T> avoiding(Shape s, double lo, double hi, std::vector<double> kinks, double margin,
                   std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(s.numel());
  for (T& x : v) {
    double c;
    do {
      c = u(rng);
    } while (std::any_of(kinks.begin(), kinks.end(),
                         [&](double k) { return std::abs(c - k) < margin; }));
    x = static_cast<T>(c);
  }
  return Tensor<T>::from_data(s, std::move(v), true);
}

// Integer part in [lo, hi], fractional part in [0.2, 0.8].
template <typename T>
Tensor<T> fractional(Shape s, int lo, int hi, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> ip(lo, hi);
  std::uniform_real_distribution<double> fp(0.2, 0.8);
  std::vector<T> v(s.numel());
  for (T& x : v) x = static_cast<T>(ip(rng) + fp(rng));
  return Tensor<T>::from_data(s, std::move(v), true);
}

template <typename T>
using Fn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

}  // namespace

template <typename T>
std::vector<GradCase<T>> gradient_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCase<T>> cases;
  const Shape shapes[3] = {{1, 2, 3, 4}, {2, 3, 4, 5}, {1, 4, 6, 3}};
  auto push = [&](const std::string& op, int k, std::vector<Tensor<T>> in, Fn<T> fn) {
    cases.push_back({op, op + "#" + std::to_string(k), std::move(in), std::move(fn)});
  };
  for (int k = 0; k < 3; ++k) {
    const Shape s = shapes[k];
    auto U = [&](double lo = -1, double hi = 1) { return uniform<T>(s, lo, hi, rng); };
    push("add", k, {U(), U()}, [](auto& x) { return add(x[0], x[1]); });
    push("sub", k, {U(), U()}, [](auto& x) { return sub(x[0], x[1]); });
    push("mul", k, {U(), U()}, [](auto& x) { return mul(x[0], x[1]); });
    push("div", k, {U(), signed_away<T>(s, 0.5, 2.0, rng)}, [](auto& x) { return div(x[0], x[1]); });
    push("add_scalar", k, {U()}, [](auto& x) { return add_scalar(x[0], T(0.7)); });
    push("mul_scalar", k, {U()}, [](auto& x) { return mul_scalar(x[0], T(-1.3)); });
    push("abs", k, {signed_away<T>(s, 0.05, 1.0, rng)}, [](auto& x) { return abs(x[0]); });
    push("square", k, {U()}, [](auto& x) { return square(x[0]); });
    push("exp", k, {U()}, [](auto& x) { return exp(x[0]); });
    push("tanh", k, {U(-2, 2)}, [](auto& x) { return tanh(x[0]); });
    push("sigmoid", k, {U(-3, 3)}, [](auto& x) { return sigmoid(x[0]); });
    push("softplus", k, {U(-3, 3)}, [](auto& x) { return softplus(x[0]); });
    push("relu", k, {signed_away<T>(s, 0.05, 1.0, rng)}, [](auto& x) { return relu(x[0]); });
    push("leaky_relu", k, {signed_away<T>(s, 0.05, 1.0, rng)},
         [](auto& x) { return leaky_relu(x[0], T(0.2)); });
    push("clamp", k, {avoiding<T>(s, -1, 1, {-0.5, 0.5}, 0.05, rng)},
         [](auto& x) { return clamp(x[0], T(-0.5), T(0.5)); });
    push("sum", k, {U()}, [](auto& x) { return sum(x[0]); });
    push("mean", k, {U()}, [](auto& x) { return mean(x[0]); });
    push("sum_channels", k, {U()}, [](auto& x) { return sum_channels(x[0]); });
    push("mean_channels", k, {U()}, [](auto& x) { return mean_channels(x[0]); });
    {
      Shape s2 = s;
      s2.c = k + 1;
      push("concat_channels", k, {U(), uniform<T>(s2, -1, 1, rng)},
           [](auto& x) { return concat_channels<T>({x[0], x[1], x[0]}); });
    }
    push("slice_channels", k, {U()}, [s](auto& x) { return slice_channels(x[0], 1, s.c - 1); });
    push("crop", k, {U()}, [s](auto& x) { return crop(x[0], 1, 0, s.h - 1, s.w - 1); });
  }
  // Spatial ops get their own shapes.
  const Shape pool_shapes[3] = {{1, 2, 4, 6}, {2, 1, 6, 6}, {1, 3, 5, 7}};
  const int pool_k[3] = {2, 3, 2}, pool_s[3] = {2, 1, 1};
  for (int k = 0; k < 3; ++k) {
    const int kk = pool_k[k], ss = pool_s[k];
    push("avg_pool", k, {uniform<T>(pool_shapes[k], -1, 1, rng)},
         [kk, ss](auto& x) { return avg_pool(x[0], kk, ss); });
    const int pad = k == 1 ? 2 : 1;
    push("pad_reflect", k, {uniform<T>(pool_shapes[k], -1, 1, rng)},
         [pad](auto& x) { return pad_reflect(x[0], pad); });
  }
  struct ConvCfg {
    Shape in;
    int out_ch, k, stride, pad;
  };
  const ConvCfg convs[3] = {{{2, 3, 8, 8}, 4, 3, 1, 1}, {{1, 2, 7, 6}, 3, 3, 2, 1},
                            {{1, 3, 5, 5}, 2, 1, 1, 0}};
  for (int k = 0; k < 3; ++k) {
    const ConvCfg c = convs[k];
    push("conv2d", k,
         {uniform<T>(c.in, -1, 1, rng), uniform<T>({c.out_ch, c.in.c, c.k, c.k}, -0.5, 0.5, rng),
          uniform<T>({1, c.out_ch, 1, 1}, -0.5, 0.5, rng)},
         [c](auto& x) { return conv2d(x[0], x[1], x[2], c.stride, c.pad); });
  }
  struct DeconvCfg {
    Shape in;
    int out_ch, k, stride, pad, out_pad;
  };
  const DeconvCfg deconvs[3] = {{{1, 3, 4, 4}, 2, 3, 2, 1, 1}, {{2, 2, 3, 5}, 3, 3, 1, 1, 0},
                                {{1, 2, 3, 3}, 2, 4, 2, 1, 0}};
  for (int k = 0; k < 3; ++k) {
    const DeconvCfg c = deconvs[k];
    push("conv_transpose2d", k,
         {uniform<T>(c.in, -1, 1, rng), uniform<T>({c.in.c, c.out_ch, c.k, c.k}, -0.5, 0.5, rng),
          uniform<T>({1, c.out_ch, 1, 1}, -0.5, 0.5, rng)},
         [c](auto& x) { return conv_transpose2d(x[0], x[1], x[2], c.stride, c.pad, c.out_pad); });
  }
  const Shape up_in[3] = {{1, 2, 3, 4}, {2, 1, 4, 4}, {1, 3, 6, 5}};
  const int up_h[3] = {6, 3, 4}, up_w[3] = {8, 7, 10};
  for (int k = 0; k < 3; ++k) {
    const int oh = up_h[k], ow = up_w[k];
    push("upsample_bilinear", k, {uniform<T>(up_in[k], -1, 1, rng)},
         [oh, ow](auto& x) { return upsample_bilinear(x[0], oh, ow); });
    push("instance_norm", k, {uniform<T>(up_in[k], -1, 1, rng)},
         [](auto& x) { return instance_norm(x[0], T(1e-5)); });
  }
  const Shape warp_src[3] = {{1, 1, 2, 8}, {2, 3, 3, 7}, {1, 2, 4, 9}};
  for (int k = 0; k < 3; ++k) {
    Shape ds = warp_src[k];
    ds.c = 1;
    const WarpDirection dir = k == 1 ? WarpDirection::right_from_left : WarpDirection::left_from_right;
    push("warp_horizontal", k,
         {uniform<T>(warp_src[k], 0, 1, rng), fractional<T>(ds, 0, 3, rng)},
         [dir](auto& x) { return warp_horizontal(x[0], x[1], dir).warped; });
  }
  return cases;
}

template std::vector<GradCase<float>> gradient_cases(std::uint64_t);
template std::vector<GradCase<double>> gradient_cases(std::uint64_t);

namespace {

// Max over probed entries of |analytic - central difference| / max(1, |analytic|).
template <typename T>
double gradient_error(GradCase<T>& c, double h, std::mt19937_64& rng) {
  const Tensor<T> out = c.fn(c.inputs);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> weights(out.numel());
  const double scale = 1.0 / std::sqrt(static_cast<double>(weights.size()));
  for (double& w : weights) w = nd(rng) * scale;
  std::vector<T> wt(weights.begin(), weights.end());
  Tensor<T> loss = sum(mul(out, Tensor<T>::from_data(out.shape(), wt)));
  for (auto& in : c.inputs) in.clear_grad();
  backward(loss);
  auto eval = [&]() {
    NoGradGuard no_grad;
    const Tensor<T> o = c.fn(c.inputs);
    double acc = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * o.data()[i];
    return acc;
  };
  double worst = 0;
  for (auto& in : c.inputs) {
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    std::vector<std::size_t> idx(in.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(idx.size(), 48));
    auto data = in.mutable_data();
    for (std::size_t i : idx) {
      const T orig = data[i];
      const T plus = static_cast<T>(orig + h), minus = static_cast<T>(orig - h);
      data[i] = plus;
      const double lp = eval();
      data[i] = minus;
      const double lm = eval();
      data[i] = orig;
      const double fd = (lp - lm) / (static_cast<double>(plus) - static_cast<double>(minus));
      worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void grad_suite(std::vector<CheckResult>& out, const CheckCallback& cb, std::uint64_t seed) {
  auto emit = [&](CheckResult r) {
    if (cb) cb(r);
    out.push_back(std::move(r));
  };
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  auto run = [&](auto cases, double h, double tol, const char* precision) {
    for (const auto& name : gradient_registry()) {
      double worst = 0;
      int count = 0;
      for (auto& c : cases) {
        if (c.op != name) continue;
        worst = std::max(worst, gradient_error(c, h, rng));
        ++count;
      }
      CheckResult r{"grad", name + " (" + precision + ")", count >= 3 && worst < tol,
                    std::to_string(count) + " shapes, max rel err " + fmt("%.3g", worst)};
      emit(std::move(r));
    }
  };
  run(gradient_cases<float>(seed), 1e-3, 1e-3, "f32");
  run(gradient_cases<double>(seed), 1e-6, 1e-6, "f64");
}

void invariant_suite(std::vector<CheckResult>& out, const CheckCallback& cb, std::uint64_t seed) {
  auto emit = [&](const std::string& name, bool ok, const std::string& detail) {
    CheckResult r{"invariants", name, ok, detail};
    if (cb) cb(r);
    out.push_back(std::move(r));
  };
  std::mt19937_64 rng(seed);
  const Shape img{2, 3, 16, 20}, map{2, 1, 16, 20};
  const Tensord a = uniform<double>(img, 0, 1, rng).detach();
  const Tensord b = uniform<double>(img, 0, 1, rng).detach();
  const LossWeights w;

  for (auto dir : {WarpDirection::left_from_right, WarpDirection::right_from_left}) {
    const auto r = warp_horizontal(a, Tensord::zeros(map), dir);
    bool same = true, full = true;
    for (std::size_t i = 0; i < a.numel(); ++i) same &= r.warped.data()[i] == a.data()[i];
    for (double m : r.valid_mask.data()) full &= m == 1.0;
    emit(std::string("warp identity ") +
             (dir == WarpDirection::left_from_right ? "left_from_right" : "right_from_left"),
         same && full, same && full ? "bitwise" : "differs");
  }
  {
    const Tensord s = ssim(a, a, w.ssim_window);
    double dev = 0;
    for (double v : s.data()) dev = std::max(dev, std::abs(v - 1.0));
    emit("ssim self-similarity", dev <= 1e-6, "max |ssim-1| " + fmt("%.3g", dev));
  }
  auto zero = [&](const std::string& name, const Tensord& loss) {
    const double v = loss.item();
    emit(name, std::abs(v) <= 1e-12, "value " + fmt("%.3g", v));
  };
  StnForwardBundle<double> bundle;
  bundle.cyc_a = bundle.rec_a = a;
  bundle.cyc_b = bundle.rec_b = b;
  zero("cycle loss at identity", cycle_loss(bundle, a, b));
  zero("reconstruction loss at identity", reconstruction_loss(bundle, a, b));
  zero("appearance loss at recon == orig", appearance_loss(a, a, Tensord::full(map, 1.0), w));
  zero("smoothness loss of constant disparity", smoothness_loss(Tensord::full(map, 3.0), a));
  {
    const Tensord d = Tensord::full(map, 2.0);
    zero("lr consistency of equal constant maps",
         add(lr_consistency_loss(d, d, WarpDirection::left_from_right),
             lr_consistency_loss(d, d, WarpDirection::right_from_left)));
  }
  {
    const Tensord d = Tensord::full(map, 2.0);
    const auto wl = warp_horizontal(b, d, WarpDirection::left_from_right);
    const auto wr = warp_horizontal(a, d, WarpDirection::right_from_left);
    zero("auxiliary loss at fake == warped",
         auxiliary_loss(wl.warped, wr.warped, wl.warped, wr.warped, wl.valid_mask, wr.valid_mask,
                        w));
  }
  {
    // Zero-shift pair with zero disparities: the smoothness floor is zero too.
    std::vector<DisparityPair<double>> sq;
    for (int k = 0; k < 4; ++k) {
      const Shape s{1, 1, 64 >> k, 64 >> k};
      sq.push_back({Tensord::zeros(s), Tensord::zeros(s)});
    }
    const Tensord ac = uniform<double>({1, 3, 64, 64}, 0, 1, rng).detach();
    zero("smn total on a zero-shift pair", smn_total(sq, ac, ac, w));
  }
}

void oracle_suite(std::vector<CheckResult>& out, const CheckCallback& cb, std::uint64_t seed) {
  auto emit = [&](const std::string& name, bool ok, const std::string& detail) {
    CheckResult r{"oracle", name, ok, detail};
    if (cb) cb(r);
    out.push_back(std::move(r));
  };
  {
    const Tensord src = Tensord::from_data({1, 1, 1, 4}, {0, 10, 20, 30});
    const auto r = warp_horizontal(src, Tensord::full({1, 1, 1, 4}, 0.5),
                                   WarpDirection::left_from_right);
    const std::vector<double> want{0, 5, 15, 25}, mask{0, 1, 1, 1};
    bool ok = true;
    for (int i = 0; i < 4; ++i) {
      ok &= r.valid_mask.data()[i] == mask[i];
      if (mask[i] > 0) ok &= std::abs(r.warped.data()[i] - want[i]) < 1e-12;
    }
    emit("warp fractional example", ok, ok ? "[masked, 5, 15, 25]" : "mismatch");
  }
  {
    const Tensord r = upsample_bilinear(Tensord::from_data({1, 1, 1, 2}, {0, 1}), 1, 4);
    const std::vector<double> want{0, 0.25, 0.75, 1};
    bool ok = true;
    for (int i = 0; i < 4; ++i) ok &= std::abs(r.data()[i] - want[i]) < 1e-12;
    emit("upsample example", ok, ok ? "[0, 0.25, 0.75, 1]" : "mismatch");
  }
  // Block matching on generated scenes.
  const int scenes = 6, size = 64, max_disp = 12;
  double within = 0, count = 0, sq_id = 0, sq_x = 0;
  for (int i = 0; i < scenes; ++i) {
    for (bool cross : {false, true}) {
      const auto t = cross ? SpectralTransform::cross_spectral() : SpectralTransform::identity();
      const SpectralPair p =
          generate_synthetic(random_scene_spec(seed * 1000 + i, 3, 0, max_disp, t), size, size);
      const Tensorf d = block_match_sad(p.left_vis, p.right_nir, max_disp);
      for (std::size_t q = 0; q < d.numel(); ++q) {
        if (p.eval_mask.data()[q] <= 0) continue;
        const double e = d.data()[q] - p.gt_disparity.data()[q];
        if (cross) {
          sq_x += e * e;
        } else {
          sq_id += e * e;
          count += 1;
          within += std::abs(e) <= 1.0 ? 1 : 0;
        }
      }
    }
  }
  const double frac = within / std::max(1.0, count);
  emit("block matching recovers identity scenes", frac >= 0.95,
       fmt("%.4f", frac) + " of unoccluded pixels within 1 px");
  const double ratio = std::sqrt(sq_x / std::max(sq_id, 1e-12));
  emit("block matching degrades cross-spectrally", ratio >= 2.0,
       "rmse ratio " + fmt("%.2f", ratio));
}

}  // namespace

bool valid_check_subset(const std::string& subset) {
  return subset == "grad" || subset == "invariants" || subset == "oracle" || subset == "all";
}

std::vector<CheckResult> run_checks(const std::string& subset, const CheckCallback& callback,
                                    std::uint64_t seed) {
  if (!valid_check_subset(subset)) {
    throw std::invalid_argument("unknown check subset '" + subset +
                                "' (expected grad, invariants, oracle or all)");
  }
  std::vector<CheckResult> out;
  if (subset == "grad" || subset == "all") grad_suite(out, callback, seed);
  if (subset == "invariants" || subset == "all") invariant_suite(out, callback, seed);
  if (subset == "oracle" || subset == "all") oracle_suite(out, callback, seed);
  return out;
}

}  // namespace xs
