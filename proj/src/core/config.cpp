#include "config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

namespace xs {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": not a number: '" + v + "'");
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": not an integer: '" + v + "'");
  return out;
}

int parse_small_int(const std::string& key, const std::string& v) {
  const std::int64_t n = parse_int(key, v);
  if (n < std::numeric_limits<int>::min() || n > std::numeric_limits<int>::max()) {
    throw ConfigError(key + ": out of range: " + v);
  }
  return static_cast<int>(n);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename M>
Field real(M member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) {
            member(c) = parse_double(k, v);
          },
          [member](const TrainConfig& c) {
            return format_number(member(const_cast<TrainConfig&>(c)));
          }};
}

template <typename M>
Field integer(M member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) {
            member(c) = parse_small_int(k, v);
          },
          [member](const TrainConfig& c) {
            return std::to_string(member(const_cast<TrainConfig&>(c)));
          }};
}

template <typename M>
Field boolean(M member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) {
            member(c) = parse_bool(k, v);
          },
          [member](const TrainConfig& c) {
            return std::string(member(const_cast<TrainConfig&>(c)) ? "true" : "false");
          }};
}

#define XS_REF(expr) [](TrainConfig& c) -> auto& { return expr; }

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"lambda_c", real(XS_REF(c.weights.lambda_c))},
      {"lambda_r", real(XS_REF(c.weights.lambda_r))},
      {"lambda_a", real(XS_REF(c.weights.lambda_a))},
      {"lambda_d", real(XS_REF(c.weights.lambda_d))},
      {"alpha_ap", real(XS_REF(c.weights.alpha_ap))},
      {"alpha_ds", real(XS_REF(c.weights.alpha_ds))},
      {"alpha_lr", real(XS_REF(c.weights.alpha_lr))},
      {"alpha_aux", real(XS_REF(c.weights.alpha_aux))},
      {"alpha_ssim", real(XS_REF(c.weights.alpha_ssim))},
      {"ssim_window", integer(XS_REF(c.weights.ssim_window))},
      {"eta", real(XS_REF(c.network.eta))},
      {"learning_rate", real(XS_REF(c.adam.learning_rate))},
      {"adam_beta1", real(XS_REF(c.adam.beta1))},
      {"adam_beta2", real(XS_REF(c.adam.beta2))},
      {"adam_eps", real(XS_REF(c.adam.eps))},
      {"batch_size", integer(XS_REF(c.batch_size))},
      {"warmup_epochs", integer(XS_REF(c.warmup_epochs))},
      {"joint_epochs", integer(XS_REF(c.joint_epochs))},
      {"seed",
       {[](TrainConfig& c, const std::string& k, const std::string& v) {
          std::uint64_t out = 0;
          const auto* end = v.data() + v.size();
          const auto [ptr, ec] = std::from_chars(v.data(), end, out);
          if (ec != std::errc() || ptr != end) {
            throw ConfigError(k + ": not a non-negative integer: '" + v + "'");
          }
          c.seed = out;
        },
        [](const TrainConfig& c) { return std::to_string(c.seed); }}},
      {"flip_probability", real(XS_REF(c.flip_probability))},
      {"use_stn", boolean(XS_REF(c.use_stn))},
      {"use_aux", boolean(XS_REF(c.use_aux))},
      {"input_mode",
       {[](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "concat") {
            c.input_mode = InputMode::concat;
          } else if (v == "ori") {
            c.input_mode = InputMode::ori;
          } else {
            throw ConfigError(k + ": expected concat or ori, got '" + v + "'");
          }
        },
        [](const TrainConfig& c) { return input_mode_name(c.input_mode); }}},
      {"supervision_mode",
       {[](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "nir_only") {
            c.supervision_mode = SupervisionMode::nir_only;
          } else if (v == "both") {
            c.supervision_mode = SupervisionMode::both;
          } else {
            throw ConfigError(k + ": expected nir_only or both, got '" + v + "'");
          }
        },
        [](const TrainConfig& c) { return supervision_mode_name(c.supervision_mode); }}},
      {"image_height", integer(XS_REF(c.image_height))},
      {"image_width", integer(XS_REF(c.image_width))},
      {"max_disparity", integer(XS_REF(c.max_disparity))},
      {"stn_base_width", integer(XS_REF(c.network.stn_base_width))},
      {"smn_base_width", integer(XS_REF(c.network.smn_base_width))},
      {"num_residual_blocks", integer(XS_REF(c.network.num_residual_blocks))},
      {"num_smn_scales", integer(XS_REF(c.network.num_smn_scales))},
      {"zero_init_residual", boolean(XS_REF(c.network.zero_init_residual))},
      {"keep_checkpoints", boolean(XS_REF(c.keep_checkpoints))},
  };
  return table;
}

#undef XS_REF

const Field& find_field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::string format_number(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::general);
  if (ec != std::errc()) return "nan";
  return std::string(buf, ptr);
}

std::string input_mode_name(InputMode mode) {
  return mode == InputMode::concat ? "concat" : "ori";
}

std::string supervision_mode_name(SupervisionMode mode) {
  return mode == SupervisionMode::nir_only ? "nir_only" : "both";
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch_size = 4;
  c.image_height = 64;
  c.image_width = 64;
  c.max_disparity = 16;
  return c;
}

void TrainConfig::resolve() {
  network.smn_input_channels = input_mode == InputMode::concat ? 12 : 6;
  try {
    weights.validate();
    network.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(adam.learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0)) throw ConfigError("adam_eps must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (warmup_epochs < 0 || joint_epochs < 0) throw ConfigError("epoch counts must be >= 0");
  if (warmup_epochs + joint_epochs < 1) {
    throw ConfigError("warmup_epochs + joint_epochs must be >= 1");
  }
  if (!(flip_probability >= 0 && flip_probability <= 1)) {
    throw ConfigError("flip_probability must lie in [0, 1]");
  }
  const int div = std::max(8, 1 << network.num_smn_scales);
  if (image_height < div || image_width < div || image_height % div || image_width % div) {
    throw ConfigError("image_height and image_width must be positive multiples of " +
                      std::to_string(div));
  }
  const int coarse = std::min(image_height, image_width) >> (network.num_smn_scales - 1);
  if (coarse < weights.ssim_window) {
    throw ConfigError("coarsest stereo scale (" + std::to_string(coarse) +
                      " px) is smaller than ssim_window");
  }
  if (max_disparity < 1 || max_disparity >= image_width) {
    throw ConfigError("max_disparity must lie in [1, image_width)");
  }
  if (!use_stn) {
    if (use_aux) throw ConfigError("use_aux requires use_stn");
    if (input_mode == InputMode::concat) throw ConfigError("input_mode concat requires use_stn");
    if (supervision_mode == SupervisionMode::both) {
      throw ConfigError("supervision_mode both requires use_stn");
    }
  }
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.first);
    return k;
  }();
  return keys;
}

void set_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
  find_field(key).set(config, key, trim(value));
}

std::string get_config_value(const TrainConfig& config, const std::string& key) {
  return find_field(key).get(config);
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError("line " + std::to_string(line_no) + ": '" + key +
                        "' already set on line " + std::to_string(it->second));
    }
    seen[key] = line_no;
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  base.resolve();
  return base;
}

TrainConfig load_config(const std::string& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string serialize_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [key, field] : fields()) {
    out += key + " = " + field.get(config) + "\n";
  }
  return out;
}

}  // namespace xs
