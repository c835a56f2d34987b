#include "warp.hpp"

#include <cmath>
#include <string>

namespace xs {

template <typename T>
WarpResult<T> warp_horizontal(const Tensor<T>& source, const Tensor<T>& disparity,
                              WarpDirection direction) {
  const Shape ss = source.shape(), ds = disparity.shape();
  if (ds.c != 1 || ds.n != ss.n || ds.h != ss.h || ds.w != ss.w) {
    throw ShapeError("warp_horizontal: disparity " + ds.str() + " does not match source " +
                     ss.str());
  }
  for (T d : disparity.data()) {
    if (!(d >= 0)) {
      throw std::invalid_argument("warp_horizontal: negative or non-finite disparity " +
                                  std::to_string(static_cast<double>(d)));
    }
  }
  const T sign = direction == WarpDirection::left_from_right ? T(-1) : T(1);
  const int W = ss.w;
  const std::size_t plane = ss.plane();

  // Per (n, y, x): left column index, fraction, validity.
  std::vector<int> x0s(ds.numel());
  std::vector<T> fracs(ds.numel());
  std::vector<T> mask(ds.numel());
  const auto& dv = disparity.data();
  for (std::size_t i = 0; i < dv.size(); ++i) {
    const int x = static_cast<int>(i % W);
    const T u = static_cast<T>(x) + sign * dv[i];
    if (u < 0 || u > static_cast<T>(W - 1)) {
      mask[i] = 0;
      x0s[i] = -1;
      fracs[i] = 0;
      continue;
    }
    int x0 = static_cast<int>(std::floor(u));
    if (x0 > W - 1) x0 = W - 1;
    mask[i] = 1;
    x0s[i] = x0;
    fracs[i] = u - static_cast<T>(x0);
  }

  std::vector<T> out(ss.numel(), T(0));
  const auto& sv = source.data();
  for (int n = 0; n < ss.n; ++n) {
    for (int c = 0; c < ss.c; ++c) {
      const T* src = sv.data() + (static_cast<std::size_t>(n) * ss.c + c) * plane;
      T* dst = out.data() + (static_cast<std::size_t>(n) * ss.c + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t di = n * plane + p;
        const int x0 = x0s[di];
        if (x0 < 0) continue;
        const T a = fracs[di];
        const T* row = src + (p / W) * W;
        dst[p] = a == 0 ? row[x0] : (1 - a) * row[x0] + a * row[x0 + 1];
      }
    }
  }

  auto si = source.impl(), di = disparity.impl();
  Tensor<T> warped = make_result<T>(
      ss, std::move(out), "warp_horizontal", {si, di},
      [si, di, x0s, fracs, ss, plane, W, sign](std::span<const T> g, std::span<const T>) {
        const auto& sv = si->data;
        std::span<T> gs, gd;
        if (si->requires_grad) gs = si->grad_buffer();
        if (di->requires_grad) gd = di->grad_buffer();
        for (int n = 0; n < ss.n; ++n) {
          for (int c = 0; c < ss.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * ss.c + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t idx = n * plane + p;
              const int x0 = x0s[idx];
              if (x0 < 0) continue;
              const T a = fracs[idx];
              const T go = g[base + p];
              const std::size_t row = base + (p / W) * W;
              if (!gs.empty()) {
                gs[row + x0] += (1 - a) * go;
                if (a != 0) gs[row + x0 + 1] += a * go;
              }
              if (!gd.empty()) {
                // d out / d u, one-sided at the last column.
                T slope = 0;
                if (x0 + 1 < W) {
                  slope = sv[row + x0 + 1] - sv[row + x0];
                } else if (x0 > 0) {
                  slope = sv[row + x0] - sv[row + x0 - 1];
                }
                gd[idx] += go * slope * sign;
              }
            }
          }
        }
      });
  return {std::move(warped), Tensor<T>::from_data(ds, std::move(mask))};
}

template <typename T>
Tensor<T> masked_mean(const Tensor<T>& values, const Tensor<T>& mask) {
  const Shape vs = values.shape(), ms = mask.shape();
  if (ms.n != vs.n || ms.h != vs.h || ms.w != vs.w || (ms.c != 1 && ms.c != vs.c)) {
    throw ShapeError("masked_mean: mask " + ms.str() + " does not match values " + vs.str());
  }
  const std::size_t plane = vs.plane();
  const bool broadcast = ms.c == 1 && vs.c != 1;
  auto mask_at = [&](int n, int c, std::size_t p) {
    return mask.data()[(static_cast<std::size_t>(n) * ms.c + (broadcast ? 0 : c)) * plane + p];
  };
  T total = 0, count = 0;
  for (int n = 0; n < vs.n; ++n)
    for (int c = 0; c < vs.c; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const T m = mask_at(n, c, p);
        if (m != 0) {
          total += values.data()[(static_cast<std::size_t>(n) * vs.c + c) * plane + p] * m;
          count += m;
        }
      }
  const T denom = count > 1 ? count : T(1);
  auto vi = values.impl();
  auto mdata = mask.impl()->data;
  const int mc = ms.c;
  return make_result<T>(
      Shape{}, {total / denom}, "masked_mean", {vi},
      [vi, mdata, vs, mc, broadcast, plane, denom](std::span<const T> g, std::span<const T>) {
        if (!vi->requires_grad) return;
        auto dst = vi->grad_buffer();
        const T scale = g[0] / denom;
        for (int n = 0; n < vs.n; ++n)
          for (int c = 0; c < vs.c; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
              const T m = mdata[(static_cast<std::size_t>(n) * mc + (broadcast ? 0 : c)) * plane + p];
              if (m != 0) dst[(static_cast<std::size_t>(n) * vs.c + c) * plane + p] += m * scale;
            }
      });
}

template WarpResult<float> warp_horizontal(const Tensor<float>&, const Tensor<float>&, WarpDirection);
template WarpResult<double> warp_horizontal(const Tensor<double>&, const Tensor<double>&, WarpDirection);
template Tensor<float> masked_mean(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> masked_mean(const Tensor<double>&, const Tensor<double>&);

}  // namespace xs
