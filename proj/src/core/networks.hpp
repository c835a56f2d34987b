#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "losses.hpp"
#include "tensor.hpp"

namespace xs {

struct AdamMoments {
  std::vector<float> m;
  std::vector<float> v;
  std::int64_t step = 0;
};

struct Parameter {
  std::string name;
  Tensorf value;
  AdamMoments moments;
};

/// Named, ordered trainable tensors of one network plus optimizer state.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(std::string name) : name_(std::move(name)) {}

  const std::string& name() const { return name_; }

  // New zero-filled parameter with requires_grad set. Names must be unique.
  // The returned reference is invalidated by the next add().
  Tensorf& add(const std::string& name, Shape shape);
  const Tensorf& get(const std::string& name) const;
  Tensorf& get(const std::string& name);
  bool contains(const std::string& name) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  std::size_t scalar_count() const;
  std::int64_t update_counter() const { return updates_; }
  void set_update_counter(std::int64_t n) { updates_ = n; }
  void bump_update_counter() { ++updates_; }

  void clear_grads();
  double grad_norm() const;        // 0 when every gradient is absent
  bool has_nonzero_grad() const;
  // FNV-1a over parameter bytes; used to detect whether a step touched the set.
  std::uint64_t fingerprint() const;

 private:
  std::string name_;
  std::vector<Parameter> params_;
  std::int64_t updates_ = 0;
};

struct NetworkSpec {
  int stn_base_width = 16;
  int smn_base_width = 16;
  int num_residual_blocks = 4;
  int num_smn_scales = 4;
  int smn_input_channels = 12;  // 12 for concatenated inputs, 6 for originals
  double eta = 0.008;
  bool zero_init_residual = false;

  void validate() const;
};

inline constexpr float kInstanceNormEps = 1e-5f;

// Builders draw weights from rng: Gaussian(0, 0.02) for the translation and
// discriminator networks, fan-in scaled Gaussian (std sqrt(2 / fan_in)) for the
// stereo network. Biases start at zero.
ParameterSet build_encoder(const NetworkSpec& spec, std::mt19937_64& rng);
ParameterSet build_generator(const NetworkSpec& spec, const std::string& name,
                             std::mt19937_64& rng);
ParameterSet build_discriminator(const NetworkSpec& spec, const std::string& name,
                                 std::mt19937_64& rng);
ParameterSet build_smn(const NetworkSpec& spec, std::mt19937_64& rng);

/// Encoder F: 7x7 stem, two stride-2 convolutions, residual stack. Output is at
/// quarter resolution with 4*stn_base_width channels.
Tensorf f_encode(const Tensorf& image, const ParameterSet& params, const NetworkSpec& spec);

/// Generator G_A or G_B: two stride-2 transposed convolutions back to full
/// resolution and a 7x7 head squashed to [0, 1] by (tanh + 1) / 2.
Tensorf g_decode(const Tensorf& feature, const ParameterSet& params);

/// Patch discriminator: three stride-2 4x4 convolutions and a 3x3 score head.
/// Raw scores, one per H/8 x W/8 patch.
Tensorf discriminate(const Tensorf& image, const ParameterSet& params);

/// Disparity predictions, finest scale first. Each scale's maps are in that
/// scale's pixel units: d = clamp(eta * W_k * softplus(raw), 0, W_k).
std::vector<DisparityPair<float>> smn_predict(const Tensorf& left_input,
                                              const Tensorf& right_input,
                                              const ParameterSet& params,
                                              const NetworkSpec& spec);

// Scalar counts derived from the spec alone.
std::size_t encoder_parameter_count(const NetworkSpec& spec);
std::size_t generator_parameter_count(const NetworkSpec& spec);
std::size_t discriminator_parameter_count(const NetworkSpec& spec);
std::size_t smn_parameter_count(const NetworkSpec& spec);

enum class NetId { f, g_a, g_b, d_a, d_b, smn };
inline constexpr NetId kAllNets[] = {NetId::f,   NetId::g_a, NetId::g_b,
                                     NetId::d_a, NetId::d_b, NetId::smn};
const char* net_name(NetId id);

/// The six networks trained together.
struct Networks {
  NetworkSpec spec;
  ParameterSet f, g_a, g_b, d_a, d_b, smn;

  static Networks create(const NetworkSpec& spec, std::uint64_t seed);

  ParameterSet& get(NetId id);
  const ParameterSet& get(NetId id) const;
  void clear_grads();

  /// STN forward for both spectra: fakes, cycles and reconstructions.
  StnForwardBundle<float> translate(const Tensorf& image_a, const Tensorf& image_b) const;
  Tensorf to_spectrum_b(const Tensorf& image_a) const;  // G_B(F(.))
  Tensorf to_spectrum_a(const Tensorf& image_b) const;  // G_A(F(.))
};

}  // namespace xs
