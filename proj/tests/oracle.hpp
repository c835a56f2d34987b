#pragma once

// Reference computations used as oracles by the tests. Everything here is
// written directly from definitions, in double precision, without calling the
// library's implementation of the thing being checked.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "tensor.hpp"

namespace oracle {

using xs::Shape;
using xs::Tensor;

template <typename T>
Tensor<T> random_tensor(Shape s, double lo, double hi, std::mt19937_64& rng,
                        bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(s.numel());
  for (T& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::from_data(s, std::move(v), requires_grad);
}

/// Central-difference check of the map inputs -> fn(inputs) contracted with
/// fixed random weights. Returns max |analytic - fd| / max(1, |analytic|) over
/// every input entry.
template <typename T>
double max_gradient_error(std::vector<Tensor<T>> inputs,
                          const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& fn,
                          double h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& in : inputs) in.set_requires_grad(true);
  const Tensor<T> out = fn(inputs);
  std::vector<double> w(out.numel());
  for (double& x : w) x = nd(rng) / std::sqrt(static_cast<double>(w.size()));
  // Analytic gradient of sum(w * out): seed the output gradient with w.
  const Tensor<T> loss =
      xs::sum(xs::mul(out, Tensor<T>::from_data(out.shape(), std::vector<T>(w.begin(), w.end()))));
  for (auto& in : inputs) in.clear_grad();
  xs::backward(loss);
  auto contract = [&] {
    xs::NoGradGuard ng;
    const Tensor<T> o = fn(inputs);
    double acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * static_cast<double>(o.data()[i]);
    return acc;
  };
  double worst = 0;
  for (auto& in : inputs) {
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    auto data = in.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T x0 = data[i];
      const T xp = static_cast<T>(x0 + h), xm = static_cast<T>(x0 - h);
      data[i] = xp;
      const double lp = contract();
      data[i] = xm;
      const double lm = contract();
      data[i] = x0;
      const double fd = (lp - lm) / (static_cast<double>(xp) - static_cast<double>(xm));
      worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

/// Plain nested-loop convolution with zero padding.
inline std::vector<double> conv2d(const std::vector<double>& in, Shape is,
                                  const std::vector<double>& w, int out_ch, int k,
                                  const std::vector<double>& bias, int stride, int pad,
                                  Shape* os) {
  const int oh = (is.h + 2 * pad - k) / stride + 1, ow = (is.w + 2 * pad - k) / stride + 1;
  *os = Shape{is.n, out_ch, oh, ow};
  std::vector<double> out(os->numel(), 0.0);
  for (int n = 0; n < is.n; ++n)
    for (int o = 0; o < out_ch; ++o)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (int c = 0; c < is.c; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * stride - pad + ky, ix = x * stride - pad + kx;
                if (iy < 0 || iy >= is.h || ix < 0 || ix >= is.w) continue;
                acc += in[((n * is.c + c) * is.h + iy) * is.w + ix] *
                       w[((o * is.c + c) * k + ky) * k + kx];
              }
          out[((n * out_ch + o) * oh + y) * ow + x] = acc;
        }
  return out;
}

/// Scatter form of the transposed convolution: every input pixel paints a
/// weighted kernel into the output. weight layout (in, out, k, k).
inline std::vector<double> conv_transpose2d(const std::vector<double>& in, Shape is,
                                            const std::vector<double>& w, int out_ch, int k,
                                            int stride, int pad, int out_pad, Shape* os) {
  const int oh = (is.h - 1) * stride - 2 * pad + k + out_pad;
  const int ow = (is.w - 1) * stride - 2 * pad + k + out_pad;
  *os = Shape{is.n, out_ch, oh, ow};
  std::vector<double> out(os->numel(), 0.0);
  for (int n = 0; n < is.n; ++n)
    for (int c = 0; c < is.c; ++c)
      for (int y = 0; y < is.h; ++y)
        for (int x = 0; x < is.w; ++x)
          for (int o = 0; o < out_ch; ++o)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int oy = y * stride - pad + ky, ox = x * stride - pad + kx;
                if (oy < 0 || oy >= oh || ox < 0 || ox >= ow) continue;
                out[((n * out_ch + o) * oh + oy) * ow + ox] +=
                    in[((n * is.c + c) * is.h + y) * is.w + x] *
                    w[((c * out_ch + o) * k + ky) * k + kx];
              }
  return out;
}

/// Align-corners-false bilinear sample of one plane at (out_h, out_w).
inline std::vector<double> bilinear(const std::vector<double>& plane, int h, int w, int out_h,
                                    int out_w) {
  std::vector<double> out(static_cast<std::size_t>(out_h) * out_w);
  auto src = [](int o, int in, int out_n) {
    double s = (o + 0.5) * static_cast<double>(in) / out_n - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const double sy = src(y, h, out_h), sx = src(x, w, out_w);
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = sy - y0, fx = sx - x0;
      out[y * out_w + x] = (1 - fy) * ((1 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1]) +
                           fy * ((1 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
    }
  return out;
}

/// SSIM of one pixel computed from its reflect-padded window.
inline double ssim_at(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                      int y, int x, int window) {
  const int r = window / 2;
  auto reflect = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
  const double n = static_cast<double>(window) * window;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const int yy = reflect(y + dy, h), xx = reflect(x + dx, w);
      const double va = a[yy * w + xx], vb = b[yy * w + xx];
      ma += va;
      mb += vb;
      saa += va * va;
      sbb += vb * vb;
      sab += va * vb;
    }
  ma /= n;
  mb /= n;
  const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

/// Exhaustive SAD block matching, window fully recomputed per pixel and per
/// candidate. Window pixels whose match falls outside the right image are
/// skipped; the cost is the mean over the remaining ones.
inline std::vector<int> block_match(const std::vector<double>& left,
                                    const std::vector<double>& right, int channels, int h, int w,
                                    int max_disp, int window) {
  const int r = window / 2;
  std::vector<int> out(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double best = std::numeric_limits<double>::infinity();
      for (int d = 0; d <= std::min(max_disp, x); ++d) {
        double cost = 0;
        int n = 0;
        for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy)
          for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
            if (xx - d < 0) continue;
            for (int c = 0; c < channels; ++c) {
              const std::size_t base = static_cast<std::size_t>(c) * h * w + yy * w;
              cost += std::abs(left[base + xx] - right[base + xx - d]);
            }
            ++n;
          }
        if (n == 0) continue;
        cost /= n;
        if (cost < best) {
          best = cost;
          out[y * w + x] = d;
        }
      }
    }
  return out;
}

template <typename T>
std::vector<double> as_double(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace oracle
