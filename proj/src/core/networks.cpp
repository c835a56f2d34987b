#include "networks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace xs {

Tensorf& ParameterSet::add(const std::string& name, Shape shape) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  Parameter p;
  p.name = name;
  p.value = Tensorf::zeros(shape, true);
  params_.push_back(std::move(p));
  return params_.back().value;
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const Parameter& p) { return p.name == name; });
}

const Tensorf& ParameterSet::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw std::out_of_range(name_ + ": no parameter named " + name);
}

Tensorf& ParameterSet::get(const std::string& name) {
  return const_cast<Tensorf&>(std::as_const(*this).get(name));
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void ParameterSet::clear_grads() {
  for (auto& p : params_) p.value.clear_grad();
}

double ParameterSet::grad_norm() const {
  double acc = 0;
  for (const auto& p : params_) {
    for (float g : p.value.grad()) acc += static_cast<double>(g) * g;
  }
  return std::sqrt(acc);
}

bool ParameterSet::has_nonzero_grad() const {
  for (const auto& p : params_) {
    for (float g : p.value.grad()) {
      if (g != 0) return true;
    }
  }
  return false;
}

std::uint64_t ParameterSet::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : params_) {
    const auto d = p.value.data();
    const auto* bytes = reinterpret_cast<const unsigned char*>(d.data());
    for (std::size_t i = 0; i < d.size_bytes(); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

void NetworkSpec::validate() const {
  if (stn_base_width < 4 || smn_base_width < 4) {
    throw std::invalid_argument("base widths must be >= 4");
  }
  if (num_residual_blocks < 1) throw std::invalid_argument("num_residual_blocks must be >= 1");
  if (num_smn_scales < 1 || num_smn_scales > 4) {
    throw std::invalid_argument("num_smn_scales must lie in [1, 4]");
  }
  if (smn_input_channels != 6 && smn_input_channels != 12) {
    throw std::invalid_argument("smn_input_channels must be 6 or 12");
  }
  if (!(eta > 0)) throw std::invalid_argument("eta must be positive");
}

namespace {

void fill_gaussian(Tensorf& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (float& v : t.mutable_data()) v = static_cast<float>(dist(rng));
}

enum class Init { stn, kaiming, zero };

void add_conv(ParameterSet& ps, const std::string& name, int out_ch, int in_ch, int k,
              Init init, std::mt19937_64& rng) {
  ps.add(name + ".weight", Shape{out_ch, in_ch, k, k});
  ps.add(name + ".bias", Shape{1, out_ch, 1, 1});
  Tensorf& w = ps.get(name + ".weight");
  if (init == Init::stn) fill_gaussian(w, 0.02, rng);
  if (init == Init::kaiming) fill_gaussian(w, std::sqrt(2.0 / (in_ch * k * k)), rng);
}

void add_conv_transpose(ParameterSet& ps, const std::string& name, int in_ch, int out_ch,
                        int k, std::mt19937_64& rng) {
  ps.add(name + ".weight", Shape{in_ch, out_ch, k, k});
  ps.add(name + ".bias", Shape{1, out_ch, 1, 1});
  Tensorf& w = ps.get(name + ".weight");
  fill_gaussian(w, 0.02, rng);
}

Tensorf conv(const Tensorf& x, const ParameterSet& ps, const std::string& name, int stride,
             int padding) {
  return conv2d(x, ps.get(name + ".weight"), ps.get(name + ".bias"), stride, padding);
}

Tensorf in_relu(const Tensorf& x) { return relu(instance_norm(x, kInstanceNormEps)); }
Tensorf lrelu(const Tensorf& x, float slope) { return leaky_relu(x, slope); }

std::size_t conv_count(int out_ch, int in_ch, int k) {
  return static_cast<std::size_t>(out_ch) * in_ch * k * k + out_ch;
}

int smn_decoder_width(const NetworkSpec& spec, int level) {
  return spec.smn_base_width * (1 << std::max(level - 1, 0));
}

constexpr float kSmnSlope = 0.1f;
constexpr float kDiscSlope = 0.2f;

}  // namespace

ParameterSet build_encoder(const NetworkSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const int w = spec.stn_base_width;
  ParameterSet ps("F");
  add_conv(ps, "stem", w, 3, 7, Init::stn, rng);
  add_conv(ps, "down1", 2 * w, w, 3, Init::stn, rng);
  add_conv(ps, "down2", 4 * w, 2 * w, 3, Init::stn, rng);
  for (int b = 0; b < spec.num_residual_blocks; ++b) {
    const std::string prefix = "res" + std::to_string(b);
    add_conv(ps, prefix + ".conv1", 4 * w, 4 * w, 3, Init::stn, rng);
    add_conv(ps, prefix + ".conv2", 4 * w, 4 * w, 3,
             spec.zero_init_residual ? Init::zero : Init::stn, rng);
  }
  return ps;
}

ParameterSet build_generator(const NetworkSpec& spec, const std::string& name,
                             std::mt19937_64& rng) {
  spec.validate();
  const int w = spec.stn_base_width;
  ParameterSet ps(name);
  add_conv_transpose(ps, "up1", 4 * w, 2 * w, 3, rng);
  add_conv_transpose(ps, "up2", 2 * w, w, 3, rng);
  add_conv(ps, "head", 3, w, 7, Init::stn, rng);
  return ps;
}

ParameterSet build_discriminator(const NetworkSpec& spec, const std::string& name,
                                 std::mt19937_64& rng) {
  spec.validate();
  const int w = spec.stn_base_width;
  ParameterSet ps(name);
  add_conv(ps, "conv1", w, 3, 4, Init::stn, rng);
  add_conv(ps, "conv2", 2 * w, w, 4, Init::stn, rng);
  add_conv(ps, "conv3", 4 * w, 2 * w, 4, Init::stn, rng);
  add_conv(ps, "score", 1, 4 * w, 3, Init::stn, rng);
  return ps;
}

ParameterSet build_smn(const NetworkSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const int w = spec.smn_base_width;
  const int levels = spec.num_smn_scales;
  ParameterSet ps("SMN");
  int in_ch = spec.smn_input_channels;
  for (int i = 0; i < levels; ++i) {
    const int ch = w << i;
    add_conv(ps, "enc" + std::to_string(i) + "a", ch, in_ch, 3, Init::kaiming, rng);
    add_conv(ps, "enc" + std::to_string(i) + "b", ch, ch, 3, Init::kaiming, rng);
    in_ch = ch;
  }
  int prev = in_ch;
  for (int j = levels - 1; j >= 0; --j) {
    const int dw = smn_decoder_width(spec, j);
    const std::string lv = std::to_string(j);
    add_conv(ps, "up" + lv, dw, prev, 3, Init::kaiming, rng);
    int cat = dw;
    if (j >= 1) cat += w << (j - 1);
    if (j < levels - 1) cat += 2;
    add_conv(ps, "iconv" + lv, dw, cat, 3, Init::kaiming, rng);
    add_conv(ps, "pred" + lv, 2, dw, 3, Init::kaiming, rng);
    prev = dw;
  }
  return ps;
}

Tensorf f_encode(const Tensorf& image, const ParameterSet& ps, const NetworkSpec& spec) {
  const Shape s = image.shape();
  if (s.c != 3) throw ShapeError("f_encode: expected 3 channels, got " + s.str());
  if (s.h % 4 != 0 || s.w % 4 != 0) {
    throw ShapeError("f_encode: spatial size must be divisible by 4, got " + s.str());
  }
  Tensorf x = in_relu(conv(pad_reflect(image, 3), ps, "stem", 1, 0));
  x = in_relu(conv(x, ps, "down1", 2, 1));
  x = in_relu(conv(x, ps, "down2", 2, 1));
  for (int b = 0; b < spec.num_residual_blocks; ++b) {
    const std::string prefix = "res" + std::to_string(b);
    Tensorf y = in_relu(conv(pad_reflect(x, 1), ps, prefix + ".conv1", 1, 0));
    y = instance_norm(conv(pad_reflect(y, 1), ps, prefix + ".conv2", 1, 0), kInstanceNormEps);
    x = add(x, y);
  }
  return x;
}

Tensorf g_decode(const Tensorf& feature, const ParameterSet& ps) {
  Tensorf x = in_relu(
      conv_transpose2d(feature, ps.get("up1.weight"), ps.get("up1.bias"), 2, 1, 1));
  x = in_relu(conv_transpose2d(x, ps.get("up2.weight"), ps.get("up2.bias"), 2, 1, 1));
  x = tanh(conv(pad_reflect(x, 3), ps, "head", 1, 0));
  return mul_scalar(add_scalar(x, 1.0f), 0.5f);
}

Tensorf discriminate(const Tensorf& image, const ParameterSet& ps) {
  if (image.shape().c != 3) {
    throw ShapeError("discriminate: expected 3 channels, got " + image.shape().str());
  }
  Tensorf x = lrelu(conv(image, ps, "conv1", 2, 1), kDiscSlope);
  x = lrelu(instance_norm(conv(x, ps, "conv2", 2, 1), kInstanceNormEps), kDiscSlope);
  x = lrelu(instance_norm(conv(x, ps, "conv3", 2, 1), kInstanceNormEps), kDiscSlope);
  return conv(x, ps, "score", 1, 1);
}

std::vector<DisparityPair<float>> smn_predict(const Tensorf& left_input,
                                              const Tensorf& right_input,
                                              const ParameterSet& ps, const NetworkSpec& spec) {
  const Shape ls = left_input.shape(), rs = right_input.shape();
  if (!(ls == rs)) {
    throw ShapeError("smn_predict: left " + ls.str() + " vs right " + rs.str());
  }
  if (ls.c * 2 != spec.smn_input_channels) {
    throw ShapeError("smn_predict: " + std::to_string(2 * ls.c) +
                     " input channels, network expects " +
                     std::to_string(spec.smn_input_channels));
  }
  const int levels = spec.num_smn_scales;
  const int div = 1 << levels;
  if (ls.h % div != 0 || ls.w % div != 0) {
    throw ShapeError("smn_predict: spatial size must be divisible by " + std::to_string(div) +
                     ", got " + ls.str());
  }
  std::vector<Tensorf> skips;
  Tensorf x = concat_channels<float>({left_input, right_input});
  for (int i = 0; i < levels; ++i) {
    const std::string lv = std::to_string(i);
    x = lrelu(conv(x, ps, "enc" + lv + "a", 2, 1), kSmnSlope);
    x = lrelu(conv(x, ps, "enc" + lv + "b", 1, 1), kSmnSlope);
    skips.push_back(x);
  }
  std::vector<DisparityPair<float>> out(levels);
  Tensorf prev = x;
  Tensorf pred_up;
  for (int j = levels - 1; j >= 0; --j) {
    const std::string lv = std::to_string(j);
    const int h = ls.h >> j, w = ls.w >> j;
    Tensorf u = lrelu(conv(upsample_bilinear(prev, h, w), ps, "up" + lv, 1, 1), kSmnSlope);
    std::vector<Tensorf> parts{u};
    if (j >= 1) parts.push_back(skips[j - 1]);
    if (pred_up.defined()) parts.push_back(pred_up);
    Tensorf ic = lrelu(conv(concat_channels(parts), ps, "iconv" + lv, 1, 1), kSmnSlope);
    Tensorf raw = softplus(conv(ic, ps, "pred" + lv, 1, 1));
    const float width = static_cast<float>(w);
    Tensorf disp = clamp(mul_scalar(raw, static_cast<float>(spec.eta) * width), 0.0f, width);
    out[j] = {slice_channels(disp, 0, 1), slice_channels(disp, 1, 1)};
    // The finer level sees the clamped prediction in raw units.
    if (j > 0) {
      pred_up = upsample_bilinear(mul_scalar(disp, 1.0f / (static_cast<float>(spec.eta) * width)),
                                  h * 2, w * 2);
    }
    prev = ic;
  }
  return out;
}

std::size_t encoder_parameter_count(const NetworkSpec& spec) {
  const int w = spec.stn_base_width;
  return conv_count(w, 3, 7) + conv_count(2 * w, w, 3) + conv_count(4 * w, 2 * w, 3) +
         2 * spec.num_residual_blocks * conv_count(4 * w, 4 * w, 3);
}

std::size_t generator_parameter_count(const NetworkSpec& spec) {
  const int w = spec.stn_base_width;
  return conv_count(2 * w, 4 * w, 3) + conv_count(w, 2 * w, 3) + conv_count(3, w, 7);
}

std::size_t discriminator_parameter_count(const NetworkSpec& spec) {
  const int w = spec.stn_base_width;
  return conv_count(w, 3, 4) + conv_count(2 * w, w, 4) + conv_count(4 * w, 2 * w, 4) +
         conv_count(1, 4 * w, 3);
}

std::size_t smn_parameter_count(const NetworkSpec& spec) {
  const int w = spec.smn_base_width;
  const int levels = spec.num_smn_scales;
  std::size_t n = 0;
  int in_ch = spec.smn_input_channels;
  for (int i = 0; i < levels; ++i) {
    n += conv_count(w << i, in_ch, 3) + conv_count(w << i, w << i, 3);
    in_ch = w << i;
  }
  int prev = in_ch;
  for (int j = levels - 1; j >= 0; --j) {
    const int dw = smn_decoder_width(spec, j);
    int cat = dw + (j >= 1 ? (w << (j - 1)) : 0) + (j < levels - 1 ? 2 : 0);
    n += conv_count(dw, prev, 3) + conv_count(dw, cat, 3) + conv_count(2, dw, 3);
    prev = dw;
  }
  return n;
}

const char* net_name(NetId id) {
  switch (id) {
    case NetId::f: return "F";
    case NetId::g_a: return "G_A";
    case NetId::g_b: return "G_B";
    case NetId::d_a: return "D_A";
    case NetId::d_b: return "D_B";
    case NetId::smn: return "SMN";
  }
  return "?";
}

Networks Networks::create(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Networks nets;
  nets.spec = spec;
  // One independent stream per network so widths of one do not perturb another.
  auto stream = [seed](std::uint64_t k) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(k)};
    return std::mt19937_64(seq);
  };
  auto r0 = stream(0), r1 = stream(1), r2 = stream(2), r3 = stream(3), r4 = stream(4),
       r5 = stream(5);
  nets.f = build_encoder(spec, r0);
  nets.g_a = build_generator(spec, "G_A", r1);
  nets.g_b = build_generator(spec, "G_B", r2);
  nets.d_a = build_discriminator(spec, "D_A", r3);
  nets.d_b = build_discriminator(spec, "D_B", r4);
  nets.smn = build_smn(spec, r5);
  return nets;
}

ParameterSet& Networks::get(NetId id) {
  return const_cast<ParameterSet&>(std::as_const(*this).get(id));
}

const ParameterSet& Networks::get(NetId id) const {
  switch (id) {
    case NetId::f: return f;
    case NetId::g_a: return g_a;
    case NetId::g_b: return g_b;
    case NetId::d_a: return d_a;
    case NetId::d_b: return d_b;
    case NetId::smn: return smn;
  }
  throw std::invalid_argument("unknown network id");
}

void Networks::clear_grads() {
  for (NetId id : kAllNets) get(id).clear_grads();
}

StnForwardBundle<float> Networks::translate(const Tensorf& image_a,
                                            const Tensorf& image_b) const {
  StnForwardBundle<float> b;
  b.x_a = f_encode(image_a, f, spec);
  b.x_b = f_encode(image_b, f, spec);
  b.fake_b = g_decode(b.x_a, g_b);
  b.fake_a = g_decode(b.x_b, g_a);
  b.rec_a = g_decode(b.x_a, g_a);
  b.rec_b = g_decode(b.x_b, g_b);
  b.cyc_a = g_decode(f_encode(b.fake_b, f, spec), g_a);
  b.cyc_b = g_decode(f_encode(b.fake_a, f, spec), g_b);
  return b;
}

Tensorf Networks::to_spectrum_b(const Tensorf& image_a) const {
  return g_decode(f_encode(image_a, f, spec), g_b);
}

Tensorf Networks::to_spectrum_a(const Tensorf& image_b) const {
  return g_decode(f_encode(image_b, f, spec), g_a);
}

}  // namespace xs
