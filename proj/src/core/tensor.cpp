#include "tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace xs {

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) +
         "x" + std::to_string(w);
}

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " +
                     b.str());
  }
}

void require_valid_shape(const Shape& s) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw ShapeError("invalid tensor shape " + s.str());
  }
}

template <typename T>
std::shared_ptr<TensorImpl<T>> new_impl(Shape shape, std::vector<T> data) {
  require_valid_shape(shape);
  if (data.size() != shape.numel()) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape.str());
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = shape;
  impl->data = std::move(data);
  return impl;
}

// Accumulates g into t when t participates in differentiation.
template <typename T>
void push_grad(const std::shared_ptr<TensorImpl<T>>& t, std::span<const T> g) {
  if (t->requires_grad) t->accumulate_grad(g);
}

template <typename T, typename Fwd, typename Dfdx>
Tensor<T> unary(const Tensor<T>& a, const char* name, Fwd fwd, Dfdx dfdx) {
  const auto& x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  auto ai = a.impl();
  return make_result<T>(
      a.shape(), std::move(out), name, {ai},
      [ai, dfdx](std::span<const T> g, std::span<const T> y) {
        if (!ai->requires_grad) return;
        auto dst = ai->grad_buffer();
        const auto& xv = ai->data;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * dfdx(xv[i], y[i]);
      });
}

void im2col_check(int k, int stride, int padding) {
  if (k < 1 || stride < 1 || padding < 0) {
    throw ShapeError("conv: kernel, stride must be >= 1 and padding >= 0");
  }
}

template <typename T>
void im2col(const T* img, int C, int H, int W, int k, int stride, int pad,
            int Ho, int Wo, T* cols) {
  const int cols_w = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = cols + static_cast<std::size_t>((c * k + ki) * k + kj) * cols_w;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int C, int H, int W, int k, int stride, int pad,
            int Ho, int Wo, T* img) {
  const int cols_w = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row =
            cols + static_cast<std::size_t>((c * k + ki) * k + kj) * cols_w;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          T* dst = img + (static_cast<std::size_t>(c) * H + iy) * W;
          const T* src = row + oy * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Bilinear, align-corners-false source coordinate for one output index.
struct LinearTap {
  int i0;
  int i1;
  double frac;
};

std::vector<LinearTap> bilinear_taps(int in, int out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
void TensorImpl<T>::accumulate_grad(std::span<const T> g) {
  if (g.size() != data.size()) {
    throw ShapeError("gradient length does not match tensor " + shape.str());
  }
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
}

template <typename T>
std::span<T> TensorImpl<T>::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  require_valid_shape(shape);
  auto impl = new_impl<T>(shape, std::vector<T>(shape.numel(), value));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> values,
                               bool requires_grad) {
  auto impl = new_impl<T>(shape, std::move(values));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return full(Shape{1, 1, 1, 1}, value, requires_grad);
}

template <typename T>
T Tensor<T>::at(int n, int c, int h, int w) const {
  const Shape& s = impl_->shape;
  return impl_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + impl_->shape.str());
  }
  return impl_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(new_impl<T>(impl_->shape, impl_->data));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto impl = new_impl<T>(impl_->shape, impl_->data);
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.data().begin(), t.data().end());
  return Tensor<To>::from_data(t.shape(), std::move(out), t.requires_grad());
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* name,
                      std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                      std::function<void(std::span<const T>, std::span<const T>)>
                          backward) {
  auto impl = new_impl<T>(shape, std::move(data));
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const auto& in) { return in->requires_grad; });
    if (any) {
      auto node = std::make_shared<Node<T>>();
      node->name = name;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
      impl->requires_grad = true;
      impl->grad_fn = std::move(node);
    }
  }
  return Tensor<T>(std::move(impl));
}

template <typename T>
Tape<T> build_tape(const Tensor<T>& root) {
  Tape<T> tape;
  if (!root.defined() || !root.impl()->grad_fn) return tape;
  std::unordered_set<const TensorImpl<T>*> visited;
  // Iterative post-order DFS; inputs are visited in their recorded order.
  struct Frame {
    std::shared_ptr<TensorImpl<T>> impl;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({root.impl(), 0});
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    const auto& node = top.impl->grad_fn;
    if (top.next_input < node->inputs.size()) {
      const auto& in = node->inputs[top.next_input++];
      if (in->grad_fn && visited.insert(in.get()).second) {
        stack.push_back({in, 0});
      }
      continue;
    }
    tape.entries.push_back({node.get(), top.impl});
    stack.pop_back();
  }
  return tape;
}

template <typename T>
void backward(const Tensor<T>& loss, BackwardOptions options) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar-shaped, got " +
                     (loss.defined() ? loss.shape().str() : std::string("undefined")));
  }
  const T one = T(1);
  if (!loss.impl()->grad_fn) {
    if (loss.requires_grad()) loss.impl()->accumulate_grad(std::span<const T>(&one, 1));
    return;
  }
  Tape<T> tape = build_tape(loss);
  loss.impl()->accumulate_grad(std::span<const T>(&one, 1));
  for (auto it = tape.entries.rbegin(); it != tape.entries.rend(); ++it) {
    auto& out = it->output;
    if (!out->grad.empty()) {
      it->node->backward(out->grad, out->data);
    }
    if (!options.retain_graph) {
      out->grad.clear();
      out->grad.shrink_to_fit();
      out->grad_fn.reset();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(out), "add", {ai, bi},
                        [ai, bi](std::span<const T> g, std::span<const T>) {
                          push_grad(ai, g);
                          push_grad(bi, g);
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(out), "sub", {ai, bi},
                        [ai, bi](std::span<const T> g, std::span<const T>) {
                          push_grad(ai, g);
                          if (bi->requires_grad) {
                            auto dst = bi->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(out), "mul", {ai, bi},
                        [ai, bi](std::span<const T> g, std::span<const T>) {
                          if (ai->requires_grad) {
                            auto dst = ai->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * bi->data[i];
                          }
                          if (bi->requires_grad) {
                            auto dst = bi->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * ai->data[i];
                          }
                        });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "div");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(out), "div", {ai, bi},
                        [ai, bi](std::span<const T> g, std::span<const T> y) {
                          if (ai->requires_grad) {
                            auto dst = ai->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] / bi->data[i];
                          }
                          if (bi->requires_grad) {
                            auto dst = bi->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i] * y[i] / bi->data[i];
                          }
                        });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary(a, "add_scalar", [s](T x) { return x + s; },
               [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary(a, "mul_scalar", [s](T x) { return x * s; },
               [s](T, T) { return s; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary(a, "abs", [](T x) { return std::abs(x); },
               [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary(a, "square", [](T x) { return x * x; },
               [](T x, T) { return 2 * x; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary(a, "exp", [](T x) { return std::exp(x); },
               [](T, T y) { return y; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary(a, "tanh", [](T x) { return std::tanh(x); },
               [](T, T y) { return 1 - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(a, "sigmoid", [](T x) { return T(1) / (1 + std::exp(-x)); },
               [](T, T y) { return y * (1 - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return unary(
      a, "softplus",
      [](T x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](T x, T) { return T(1) / (1 + std::exp(-x)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(a, "relu", [](T x) { return x > 0 ? x : T(0); },
               [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  return unary(a, "leaky_relu", [slope](T x) { return x > 0 ? x : slope * x; },
               [slope](T x, T) { return x > 0 ? T(1) : slope; });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary(a, "clamp", [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
               [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  auto ai = a.impl();
  return make_result<T>(Shape{}, {acc}, "sum", {ai},
                        [ai](std::span<const T> g, std::span<const T>) {
                          if (!ai->requires_grad) return;
                          auto dst = ai->grad_buffer();
                          for (auto& d : dst) d += g[0];
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0;
  for (T v : a.data()) acc += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  auto ai = a.impl();
  return make_result<T>(Shape{}, {static_cast<T>(acc / static_cast<double>(a.numel()))}, "mean", {ai},
                        [ai, inv](std::span<const T> g, std::span<const T>) {
                          if (!ai->requires_grad) return;
                          auto dst = ai->grad_buffer();
                          for (auto& d : dst) d += g[0] * inv;
                        });
}

namespace {

template <typename T>
Tensor<T> reduce_channels(const Tensor<T>& a, bool average, const char* name) {
  const Shape s = a.shape();
  const std::size_t plane = s.plane();
  const T scale = average ? T(1) / static_cast<T>(s.c) : T(1);
  std::vector<T> out(static_cast<std::size_t>(s.n) * plane, T(0));
  const auto& x = a.data();
  for (int n = 0; n < s.n; ++n) {
    T* dst = out.data() + n * plane;
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
    }
    if (average) {
      for (std::size_t i = 0; i < plane; ++i) dst[i] *= scale;
    }
  }
  auto ai = a.impl();
  return make_result<T>(Shape{s.n, 1, s.h, s.w}, std::move(out), name, {ai},
                        [ai, s, plane, scale](std::span<const T> g, std::span<const T>) {
                          if (!ai->requires_grad) return;
                          auto dst = ai->grad_buffer();
                          for (int n = 0; n < s.n; ++n) {
                            for (int c = 0; c < s.c; ++c) {
                              T* d = dst.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
                              const T* gs = g.data() + n * plane;
                              for (std::size_t i = 0; i < plane; ++i) d[i] += gs[i] * scale;
                            }
                          }
                        });
}

}  // namespace

template <typename T>
Tensor<T> sum_channels(const Tensor<T>& a) {
  return reduce_channels(a, false, "sum_channels");
}

template <typename T>
Tensor<T> mean_channels(const Tensor<T>& a) {
  return reduce_channels(a, true, "mean_channels");
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape first = parts.front().shape();
  int total_c = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: shape mismatch " + first.str() + " vs " + s.str());
    }
    total_c += s.c;
  }
  const Shape out_shape{first.n, total_c, first.h, first.w};
  const std::size_t plane = first.plane();
  std::vector<T> out(out_shape.numel());
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::vector<int> offsets;
  int offset = 0;
  for (const auto& p : parts) {
    const int c = p.shape().c;
    for (int n = 0; n < first.n; ++n) {
      std::copy_n(p.data().data() + static_cast<std::size_t>(n) * c * plane, c * plane,
                  out.data() + (static_cast<std::size_t>(n) * total_c + offset) * plane);
    }
    inputs.push_back(p.impl());
    offsets.push_back(offset);
    offset += c;
  }
  auto ins = inputs;
  return make_result<T>(
      out_shape, std::move(out), "concat_channels", std::move(inputs),
      [ins, offsets, first, total_c, plane](std::span<const T> g, std::span<const T>) {
        for (std::size_t k = 0; k < ins.size(); ++k) {
          const auto& in = ins[k];
          if (!in->requires_grad) continue;
          const int c = in->shape.c;
          auto dst = in->grad_buffer();
          for (int n = 0; n < first.n; ++n) {
            const T* src = g.data() + (static_cast<std::size_t>(n) * total_c + offsets[k]) * plane;
            T* d = dst.data() + static_cast<std::size_t>(n) * c * plane;
            for (std::size_t i = 0; i < c * plane; ++i) d[i] += src[i];
          }
        }
      });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int begin, int count) {
  const Shape s = a.shape();
  if (begin < 0 || count < 1 || begin + count > s.c) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + s.str());
  }
  const std::size_t plane = s.plane();
  const Shape out_shape{s.n, count, s.h, s.w};
  std::vector<T> out(out_shape.numel());
  for (int n = 0; n < s.n; ++n) {
    std::copy_n(a.data().data() + (static_cast<std::size_t>(n) * s.c + begin) * plane,
                count * plane, out.data() + static_cast<std::size_t>(n) * count * plane);
  }
  auto ai = a.impl();
  return make_result<T>(out_shape, std::move(out), "slice_channels", {ai},
                        [ai, s, begin, count, plane](std::span<const T> g, std::span<const T>) {
                          if (!ai->requires_grad) return;
                          auto dst = ai->grad_buffer();
                          for (int n = 0; n < s.n; ++n) {
                            T* d = dst.data() + (static_cast<std::size_t>(n) * s.c + begin) * plane;
                            const T* src = g.data() + static_cast<std::size_t>(n) * count * plane;
                            for (std::size_t i = 0; i < count * plane; ++i) d[i] += src[i];
                          }
                        });
}

template <typename T>
Tensor<T> crop(const Tensor<T>& a, int top, int left, int height, int width) {
  const Shape s = a.shape();
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > s.h ||
      left + width > s.w) {
    throw ShapeError("crop: window outside " + s.str());
  }
  const Shape out_shape{s.n, s.c, height, width};
  std::vector<T> out(out_shape.numel());
  const int planes = s.n * s.c;
  for (int p = 0; p < planes; ++p) {
    for (int y = 0; y < height; ++y) {
      const T* src = a.data().data() + (static_cast<std::size_t>(p) * s.h + top + y) * s.w + left;
      std::copy_n(src, width, out.data() + (static_cast<std::size_t>(p) * height + y) * width);
    }
  }
  auto ai = a.impl();
  return make_result<T>(out_shape, std::move(out), "crop", {ai},
                        [ai, s, top, left, height, width, planes](std::span<const T> g,
                                                                   std::span<const T>) {
                          if (!ai->requires_grad) return;
                          auto dst = ai->grad_buffer();
                          for (int p = 0; p < planes; ++p) {
                            for (int y = 0; y < height; ++y) {
                              T* d = dst.data() + (static_cast<std::size_t>(p) * s.h + top + y) * s.w + left;
                              const T* src = g.data() + (static_cast<std::size_t>(p) * height + y) * width;
                              for (int x = 0; x < width; ++x) d[x] += src[x];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& a, int kernel, int stride) {
  const Shape s = a.shape();
  if (kernel < 1 || stride < 1) throw ShapeError("avg_pool: kernel and stride must be >= 1");
  if (kernel > s.h || kernel > s.w) {
    throw ShapeError("avg_pool: window " + std::to_string(kernel) + " larger than " + s.str());
  }
  const int ho = (s.h - kernel) / stride + 1;
  const int wo = (s.w - kernel) / stride + 1;
  const Shape out_shape{s.n, s.c, ho, wo};
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  std::vector<T> out(out_shape.numel());
  const int planes = s.n * s.c;
  const auto& x = a.data();
  for (int p = 0; p < planes; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * s.plane();
    T* dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        T acc = 0;
        for (int ky = 0; ky < kernel; ++ky) {
          const T* row = src + (oy * stride + ky) * s.w + ox * stride;
          for (int kx = 0; kx < kernel; ++kx) acc += row[kx];
        }
        dst[oy * wo + ox] = acc * inv;
      }
    }
  }
  auto ai = a.impl();
  return make_result<T>(
      out_shape, std::move(out), "avg_pool", {ai},
      [ai, s, kernel, stride, ho, wo, inv, planes](std::span<const T> g, std::span<const T>) {
        if (!ai->requires_grad) return;
        auto dst = ai->grad_buffer();
        for (int p = 0; p < planes; ++p) {
          T* d = dst.data() + static_cast<std::size_t>(p) * s.plane();
          const T* gs = g.data() + static_cast<std::size_t>(p) * ho * wo;
          for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
              const T v = gs[oy * wo + ox] * inv;
              for (int ky = 0; ky < kernel; ++ky) {
                T* row = d + (oy * stride + ky) * s.w + ox * stride;
                for (int kx = 0; kx < kernel; ++kx) row[kx] += v;
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& a, int pad) {
  const Shape s = a.shape();
  if (pad < 0 || pad >= s.h || pad >= s.w) {
    throw ShapeError("pad_reflect: padding " + std::to_string(pad) + " invalid for " + s.str());
  }
  if (pad == 0) {
    auto ai = a.impl();
    return make_result<T>(s, a.impl()->data, "pad_reflect", {ai},
                          [ai](std::span<const T> g, std::span<const T>) { push_grad(ai, g); });
  }
  const int ho = s.h + 2 * pad, wo = s.w + 2 * pad;
  auto reflect = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  std::vector<int> ys(ho), xs(wo);
  for (int y = 0; y < ho; ++y) ys[y] = reflect(y - pad, s.h);
  for (int x = 0; x < wo; ++x) xs[x] = reflect(x - pad, s.w);
  const int planes = s.n * s.c;
  std::vector<T> out(static_cast<std::size_t>(planes) * ho * wo);
  for (int p = 0; p < planes; ++p) {
    const T* src = a.data().data() + static_cast<std::size_t>(p) * s.plane();
    T* dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int y = 0; y < ho; ++y)
      for (int x = 0; x < wo; ++x) dst[y * wo + x] = src[ys[y] * s.w + xs[x]];
  }
  auto ai = a.impl();
  return make_result<T>(Shape{s.n, s.c, ho, wo}, std::move(out), "pad_reflect", {ai},
                        [ai, s, ys, xs, ho, wo, planes](std::span<const T> g, std::span<const T>) {
                          if (!ai->requires_grad) return;
                          auto dst = ai->grad_buffer();
                          for (int p = 0; p < planes; ++p) {
                            T* d = dst.data() + static_cast<std::size_t>(p) * s.plane();
                            const T* gs = g.data() + static_cast<std::size_t>(p) * ho * wo;
                            for (int y = 0; y < ho; ++y)
                              for (int x = 0; x < wo; ++x) d[ys[y] * s.w + xs[x]] += gs[y * wo + x];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolutions

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding) {
  const Shape is = input.shape(), ws = weight.shape();
  if (ws.h != ws.w || ws.c != is.c) {
    throw ShapeError("conv2d: weight " + ws.str() + " incompatible with input " + is.str());
  }
  if (bias.defined() && (bias.numel() != static_cast<std::size_t>(ws.n))) {
    throw ShapeError("conv2d: bias " + bias.shape().str() + " does not match weight " + ws.str());
  }
  const int k = ws.h;
  im2col_check(k, stride, padding);
  const int ho = (is.h + 2 * padding - k) / stride + 1;
  const int wo = (is.w + 2 * padding - k) / stride + 1;
  if (is.h + 2 * padding < k || is.w + 2 * padding < k) {
    throw ShapeError("conv2d: kernel " + ws.str() + " larger than padded input " + is.str());
  }
  const int cout = ws.n, ck = is.c * k * k, hw = ho * wo;
  const Shape out_shape{is.n, cout, ho, wo};
  std::vector<T> out(out_shape.numel());
  const bool keep_cols = grad_enabled() && weight.requires_grad();
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(ck) * hw * (keep_cols ? is.n : 1));
  ConstMapMat<T> wmat(weight.data().data(), cout, ck);
  for (int n = 0; n < is.n; ++n) {
    T* c = cols->data() + (keep_cols ? static_cast<std::size_t>(n) * ck * hw : 0);
    im2col(input.data().data() + static_cast<std::size_t>(n) * is.c * is.plane(), is.c, is.h,
           is.w, k, stride, padding, ho, wo, c);
    MapMat<T> omat(out.data() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
    omat.noalias() = wmat * ConstMapMat<T>(c, ck, hw);
    if (bias.defined()) {
      for (int o = 0; o < cout; ++o) omat.row(o).array() += bias.data()[o];
    }
  }
  if (!keep_cols) cols.reset();
  auto ii = input.impl(), wi = weight.impl();
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs{ii, wi};
  std::shared_ptr<TensorImpl<T>> bi;
  if (bias.defined()) {
    bi = bias.impl();
    inputs.push_back(bi);
  }
  return make_result<T>(
      out_shape, std::move(out), "conv2d", std::move(inputs),
      [ii, wi, bi, cols, is, k, stride, padding, ho, wo, cout, ck, hw](
          std::span<const T> g, std::span<const T>) {
        ConstMapMat<T> wmat(wi->data.data(), cout, ck);
        std::vector<T> dcols;
        if (ii->requires_grad) dcols.resize(static_cast<std::size_t>(ck) * hw);
        std::vector<T> scratch;
        for (int n = 0; n < is.n; ++n) {
          ConstMapMat<T> gmat(g.data() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
          if (wi->requires_grad) {
            const T* c = cols->data() + static_cast<std::size_t>(n) * ck * hw;
            MapMat<T> dw(wi->grad_buffer().data(), cout, ck);
            dw.noalias() += gmat * ConstMapMat<T>(c, ck, hw).transpose();
          }
          if (bi && bi->requires_grad) {
            auto db = bi->grad_buffer();
            // Plain loop: Eigen's vectorised sum depends on buffer alignment.
            for (int o = 0; o < cout; ++o) {
              const T* row = g.data() + (static_cast<std::size_t>(n) * cout + o) * hw;
              T acc = 0;
              for (int i = 0; i < hw; ++i) acc += row[i];
              db[o] += acc;
            }
          }
          if (ii->requires_grad) {
            MapMat<T> dc(dcols.data(), ck, hw);
            dc.noalias() = wmat.transpose() * gmat;
            col2im(dcols.data(), is.c, is.h, is.w, k, stride, padding, ho, wo,
                   ii->grad_buffer().data() + static_cast<std::size_t>(n) * is.c * is.plane());
          }
        }
      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, int stride, int padding,
                           int output_padding) {
  const Shape is = input.shape(), ws = weight.shape();
  if (ws.h != ws.w || ws.n != is.c) {
    throw ShapeError("conv_transpose2d: weight " + ws.str() + " incompatible with input " +
                     is.str());
  }
  const int k = ws.h, cout = ws.c;
  im2col_check(k, stride, padding);
  if (output_padding < 0 || output_padding >= stride) {
    throw ShapeError("conv_transpose2d: output_padding must be in [0, stride)");
  }
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(cout)) {
    throw ShapeError("conv_transpose2d: bias " + bias.shape().str() +
                     " does not match weight " + ws.str());
  }
  const int ho = (is.h - 1) * stride - 2 * padding + k + output_padding;
  const int wo = (is.w - 1) * stride - 2 * padding + k + output_padding;
  if (ho < 1 || wo < 1) throw ShapeError("conv_transpose2d: empty output for " + is.str());
  const int cin = is.c, ck = cout * k * k, hw_in = is.h * is.w;
  const Shape out_shape{is.n, cout, ho, wo};
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  std::vector<T> out(out_shape.numel(), T(0));
  ConstMapMat<T> wmat(weight.data().data(), cin, ck);
  std::vector<T> cols(static_cast<std::size_t>(ck) * hw_in);
  for (int n = 0; n < is.n; ++n) {
    ConstMapMat<T> xmat(input.data().data() + static_cast<std::size_t>(n) * cin * hw_in, cin, hw_in);
    MapMat<T>(cols.data(), ck, hw_in).noalias() = wmat.transpose() * xmat;
    T* o = out.data() + static_cast<std::size_t>(n) * cout * out_plane;
    col2im(cols.data(), cout, ho, wo, k, stride, padding, is.h, is.w, o);
    if (bias.defined()) {
      for (int c = 0; c < cout; ++c) {
        const T b = bias.data()[c];
        for (std::size_t i = 0; i < out_plane; ++i) o[c * out_plane + i] += b;
      }
    }
  }
  auto ii = input.impl(), wi = weight.impl();
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs{ii, wi};
  std::shared_ptr<TensorImpl<T>> bi;
  if (bias.defined()) {
    bi = bias.impl();
    inputs.push_back(bi);
  }
  return make_result<T>(
      out_shape, std::move(out), "conv_transpose2d", std::move(inputs),
      [ii, wi, bi, is, k, stride, padding, ho, wo, cin, cout, ck, hw_in, out_plane](
          std::span<const T> g, std::span<const T>) {
        ConstMapMat<T> wmat(wi->data.data(), cin, ck);
        std::vector<T> gcols(static_cast<std::size_t>(ck) * hw_in);
        for (int n = 0; n < is.n; ++n) {
          const T* gn = g.data() + static_cast<std::size_t>(n) * cout * out_plane;
          if (bi && bi->requires_grad) {
            auto db = bi->grad_buffer();
            for (int c = 0; c < cout; ++c) {
              T acc = 0;
              for (std::size_t i = 0; i < out_plane; ++i) acc += gn[c * out_plane + i];
              db[c] += acc;
            }
          }
          if (!ii->requires_grad && !wi->requires_grad) continue;
          im2col(gn, cout, ho, wo, k, stride, padding, is.h, is.w, gcols.data());
          ConstMapMat<T> gc(gcols.data(), ck, hw_in);
          if (ii->requires_grad) {
            MapMat<T> dx(ii->grad_buffer().data() + static_cast<std::size_t>(n) * cin * hw_in, cin, hw_in);
            dx.noalias() += wmat * gc;
          }
          if (wi->requires_grad) {
            ConstMapMat<T> xmat(ii->data.data() + static_cast<std::size_t>(n) * cin * hw_in, cin, hw_in);
            MapMat<T> dw(wi->grad_buffer().data(), cin, ck);
            dw.noalias() += xmat * gc.transpose();
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Resampling and normalization

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& a, int out_h, int out_w) {
  const Shape s = a.shape();
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("upsample_bilinear: invalid output size " + std::to_string(out_h) + "x" +
                     std::to_string(out_w));
  }
  auto ai = a.impl();
  if (out_h == s.h && out_w == s.w) {
    return make_result<T>(s, ai->data, "upsample_bilinear", {ai},
                          [ai](std::span<const T> g, std::span<const T>) { push_grad(ai, g); });
  }
  const auto ty = bilinear_taps(s.h, out_h);
  const auto tx = bilinear_taps(s.w, out_w);
  const int planes = s.n * s.c;
  const Shape out_shape{s.n, s.c, out_h, out_w};
  std::vector<T> out(out_shape.numel());
  for (int p = 0; p < planes; ++p) {
    const T* src = ai->data.data() + static_cast<std::size_t>(p) * s.plane();
    T* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const T fy = static_cast<T>(ty[y].frac);
      const T* r0 = src + ty[y].i0 * s.w;
      const T* r1 = src + ty[y].i1 * s.w;
      for (int x = 0; x < out_w; ++x) {
        const T fx = static_cast<T>(tx[x].frac);
        const T top = r0[tx[x].i0] * (1 - fx) + r0[tx[x].i1] * fx;
        const T bot = r1[tx[x].i0] * (1 - fx) + r1[tx[x].i1] * fx;
        dst[y * out_w + x] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return make_result<T>(
      out_shape, std::move(out), "upsample_bilinear", {ai},
      [ai, s, ty, tx, planes, out_h, out_w](std::span<const T> g, std::span<const T>) {
        if (!ai->requires_grad) return;
        auto dst = ai->grad_buffer();
        for (int p = 0; p < planes; ++p) {
          T* d = dst.data() + static_cast<std::size_t>(p) * s.plane();
          const T* gs = g.data() + static_cast<std::size_t>(p) * out_h * out_w;
          for (int y = 0; y < out_h; ++y) {
            const T fy = static_cast<T>(ty[y].frac);
            T* r0 = d + ty[y].i0 * s.w;
            T* r1 = d + ty[y].i1 * s.w;
            for (int x = 0; x < out_w; ++x) {
              const T fx = static_cast<T>(tx[x].frac);
              const T v = gs[y * out_w + x];
              r0[tx[x].i0] += v * (1 - fy) * (1 - fx);
              r0[tx[x].i1] += v * (1 - fy) * fx;
              r1[tx[x].i0] += v * fy * (1 - fx);
              r1[tx[x].i1] += v * fy * fx;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& a, T eps) {
  const Shape s = a.shape();
  const std::size_t plane = s.plane();
  if (plane < 2) throw ShapeError("instance_norm: plane must hold >= 2 values, got " + s.str());
  const int planes = s.n * s.c;
  std::vector<T> out(a.numel());
  std::vector<T> inv_std(planes);
  const auto& x = a.data();
  for (int p = 0; p < planes; ++p) {
    const T* src = x.data() + p * plane;
    // Statistics in double so a constant plane maps to exact zeros.
    double mu = 0;
    for (std::size_t i = 0; i < plane; ++i) mu += src[i];
    mu /= static_cast<double>(plane);
    double var = 0;
    for (std::size_t i = 0; i < plane; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(plane);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    inv_std[p] = static_cast<T>(is);
    T* dst = out.data() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<T>((src[i] - mu) * is);
  }
  auto ai = a.impl();
  return make_result<T>(
      s, std::move(out), "instance_norm", {ai},
      [ai, inv_std, plane, planes](std::span<const T> g, std::span<const T> y) {
        if (!ai->requires_grad) return;
        auto dst = ai->grad_buffer();
        const T inv_n = T(1) / static_cast<T>(plane);
        for (int p = 0; p < planes; ++p) {
          const T* gp = g.data() + p * plane;
          const T* yp = y.data() + p * plane;
          T gm = 0, gy = 0;
          for (std::size_t i = 0; i < plane; ++i) {
            gm += gp[i];
            gy += gp[i] * yp[i];
          }
          gm *= inv_n;
          gy *= inv_n;
          T* d = dst.data() + p * plane;
          for (std::size_t i = 0; i < plane; ++i) d[i] += inv_std[p] * (gp[i] - gm - yp[i] * gy);
        }
      });
}

const std::vector<std::string>& differentiable_op_names() {
  static const std::vector<std::string> names{
      "add",          "sub",           "mul",           "div",
      "add_scalar",   "mul_scalar",    "abs",           "square",
      "exp",          "tanh",          "sigmoid",       "softplus",
      "relu",         "leaky_relu",    "clamp",         "sum",
      "mean",         "sum_channels",  "mean_channels", "concat_channels",
      "slice_channels", "crop",        "avg_pool",      "pad_reflect",
      "conv2d",       "conv_transpose2d", "upsample_bilinear", "instance_norm",
  };
  return names;
}

// ---------------------------------------------------------------------------

#define XS_INSTANTIATE(T)                                                              \
  template struct TensorImpl<T>;                                                       \
  template class Tensor<T>;                                                            \
  template Tape<T> build_tape(const Tensor<T>&);                                       \
  template void backward(const Tensor<T>&, BackwardOptions);                           \
  template Tensor<T> make_result(Shape, std::vector<T>, const char*,                   \
                                 std::vector<std::shared_ptr<TensorImpl<T>>>,          \
                                 std::function<void(std::span<const T>, std::span<const T>)>); \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                  \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                  \
  template Tensor<T> abs(const Tensor<T>&);                                            \
  template Tensor<T> square(const Tensor<T>&);                                         \
  template Tensor<T> exp(const Tensor<T>&);                                            \
  template Tensor<T> tanh(const Tensor<T>&);                                           \
  template Tensor<T> sigmoid(const Tensor<T>&);                                        \
  template Tensor<T> softplus(const Tensor<T>&);                                       \
  template Tensor<T> relu(const Tensor<T>&);                                           \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                  \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                    \
  template Tensor<T> sum(const Tensor<T>&);                                            \
  template Tensor<T> mean(const Tensor<T>&);                                           \
  template Tensor<T> sum_channels(const Tensor<T>&);                                   \
  template Tensor<T> mean_channels(const Tensor<T>&);                                  \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                   \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);                       \
  template Tensor<T> crop(const Tensor<T>&, int, int, int, int);                       \
  template Tensor<T> avg_pool(const Tensor<T>&, int, int);                             \
  template Tensor<T> pad_reflect(const Tensor<T>&, int);                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int); \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                      int, int, int);                                  \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, int, int);                    \
  template Tensor<T> instance_norm(const Tensor<T>&, T);

XS_INSTANTIATE(float)
XS_INSTANTIATE(double)
#undef XS_INSTANTIATE

template Tensor<double> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<double>&);
template Tensor<float> cast(const Tensor<float>&);
template Tensor<double> cast(const Tensor<double>&);

}  // namespace xs
