#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "data.hpp"
#include "losses.hpp"
#include "networks.hpp"
#include "optim.hpp"

namespace xs {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  LossWeights weights;
  NetworkSpec network;  // smn_input_channels follows input_mode
  AdamSettings adam;
  int batch_size = 16;
  int warmup_epochs = 15;
  int joint_epochs = 10;
  std::uint64_t seed = 0;
  double flip_probability = 0.5;
  // Pipeline variant. use_stn = false is the stereo-network-only baseline:
  // originals as inputs and as supervision, no warmup, no step 1/2/4.
  bool use_stn = true;
  bool use_aux = true;
  InputMode input_mode = InputMode::concat;
  SupervisionMode supervision_mode = SupervisionMode::nir_only;
  int image_height = 384;
  int image_width = 512;
  // Search range of the block-matching oracle and top of the colour ramp.
  int max_disparity = 64;
  bool keep_checkpoints = false;

  // Batch 4 at 64x64 with a 16 px disparity range.
  static TrainConfig desk();

  // Copies input_mode into network.smn_input_channels and checks every field.
  // Throws ConfigError.
  void resolve();
};

std::string input_mode_name(InputMode mode);
std::string supervision_mode_name(SupervisionMode mode);

/// Every addressable key, in serialization order.
const std::vector<std::string>& config_keys();

/// Applies one `key = value` assignment. Unknown keys and malformed values
/// throw ConfigError.
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const TrainConfig& config, const std::string& key);

/// Parses flat `key = value` text over the given base config; '#' starts a
/// comment. The result is resolved.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::string& path, TrainConfig base = {});

/// One `key = value` line per key; numbers in shortest round-trip form.
std::string serialize_config(const TrainConfig& config);

std::string format_number(double value);

}  // namespace xs
