#pragma once

// Minimal reverse-mode autodiff over dense NCHW tensors.
//
// Every op returns a new tensor. When grad mode is enabled and at least one
// input requires grad, the op records a node (inputs + backward rule) on the
// output; backward() walks those nodes in reverse topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace xs {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Receives the output's gradient and values; accumulates into inputs.
  std::function<void(std::span<const T> grad_out, std::span<const T> out)>
      backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty == absent
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;

  void accumulate_grad(std::span<const T> g);
  std::span<T> grad_buffer();  // allocates zeros if absent
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> values,
                          bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->shape.numel(); }

  std::span<const T> data() const { return impl_->data; }
  // Writes bypass the tape; only meant for leaves (parameters, inputs).
  std::span<T> mutable_data() { return impl_->data; }

  T at(int n, int c, int h, int w) const;
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }
  void clear_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }

  bool is_leaf() const { return impl_->grad_fn == nullptr; }
  const Node<T>* grad_fn() const { return impl_->grad_fn.get(); }

  // Value-equal copy that is not connected to this tensor's graph.
  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t);

// Grad mode is thread-local. While a NoGradGuard is alive no nodes are recorded.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Recorded operations reachable from a root, inputs before consumers.
template <typename T>
struct Tape {
  struct Entry {
    const Node<T>* node;
    std::shared_ptr<TensorImpl<T>> output;
  };
  std::vector<Entry> entries;
};

template <typename T>
Tape<T> build_tape(const Tensor<T>& root);

struct BackwardOptions {
  // When false, recorded nodes are released after the pass.
  bool retain_graph = false;
};

template <typename T>
void backward(const Tensor<T>& loss, BackwardOptions options = {});

// ---------------------------------------------------------------------------
// Ops. Binary elementwise ops require identical shapes; *_scalar variants
// cover the tensor-vs-scalar case.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> softplus(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& a, T slope);
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

// Scalar-shaped (1x1x1x1) reductions.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

// Channel reductions to a 1-channel tensor.
template <typename T> Tensor<T> sum_channels(const Tensor<T>& a);
template <typename T> Tensor<T> mean_channels(const Tensor<T>& a);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int begin, int count);
template <typename T>
Tensor<T> crop(const Tensor<T>& a, int top, int left, int height, int width);

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& a, int kernel, int stride = 1);
template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& a, int pad);

// weight: (out_ch, in_ch, k, k); bias: (1, out_ch, 1, 1) or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding);
// weight: (in_ch, out_ch, k, k). Output size (H-1)*stride - 2*padding + k + output_padding.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, int stride, int padding,
                           int output_padding);

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& a, int out_h, int out_w);
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& a, T eps);

// Names of every differentiable op above; the verification suite must cover
// each of them.
const std::vector<std::string>& differentiable_op_names();

// Internal helper used by other modules to register custom ops.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* name,
                      std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                      std::function<void(std::span<const T>, std::span<const T>)>
                          backward);

}  // namespace xs
