#include "checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace xs {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[4] = {'X', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<char*>(&v), 4); }

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw CheckpointError(path + ": truncated");
  return v;
}

void put_record(std::ostream& out, const std::string& name, const Shape& s,
                std::span<const float> data) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  for (int d : {s.n, s.c, s.h, s.w}) put_u32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size_bytes()));
}

struct Record {
  Shape shape;
  std::vector<float> data;
};

void write_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw CheckpointError("state.txt: bad integer for " + key + ": " + v);
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& dir, const Networks& nets, const TrainProgress& progress,
                     const std::string& config_text) {
  fs::create_directories(dir);
  std::ostringstream bin(std::ios::binary);
  std::uint32_t count = 0;
  for (NetId id : kAllNets) {
    for (const auto& p : nets.get(id).parameters()) count += p.moments.m.empty() ? 1 : 3;
  }
  bin.write(kMagic, 4);
  put_u32(bin, kVersion);
  put_u32(bin, count);
  std::ostringstream state;
  const NetworkSpec& s = nets.spec;
  state << "format_version = " << kVersion << "\n"
        << "epochs_done = " << progress.epochs_done << "\n"
        << "global_step = " << progress.global_step << "\n"
        << "stn_base_width = " << s.stn_base_width << "\n"
        << "smn_base_width = " << s.smn_base_width << "\n"
        << "num_residual_blocks = " << s.num_residual_blocks << "\n"
        << "num_smn_scales = " << s.num_smn_scales << "\n"
        << "smn_input_channels = " << s.smn_input_channels << "\n"
        << "zero_init_residual = " << (s.zero_init_residual ? 1 : 0) << "\n";
  {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, s.eta);
    state << "eta = " << std::string(buf, r.ptr) << "\n";
  }
  for (NetId id : kAllNets) {
    const ParameterSet& ps = nets.get(id);
    state << "updates." << net_name(id) << " = " << ps.update_counter() << "\n";
    for (const auto& p : ps.parameters()) {
      const std::string name = std::string(net_name(id)) + "/" + p.name;
      put_record(bin, name, p.value.shape(), p.value.data());
      if (!p.moments.m.empty()) {
        put_record(bin, name + "@m", p.value.shape(), p.moments.m);
        put_record(bin, name + "@v", p.value.shape(), p.moments.v);
      }
      state << "adam_step." << name << " = " << p.moments.step << "\n";
    }
  }
  write_atomic(fs::path(dir) / "weights.bin", bin.str());
  if (!config_text.empty()) write_atomic(fs::path(dir) / "config.txt", config_text);
  // state.txt last: its presence marks a complete checkpoint.
  write_atomic(fs::path(dir) / "state.txt", state.str());
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path state_path = fs::path(dir) / "state.txt";
  const fs::path bin_path = fs::path(dir) / "weights.bin";
  if (!fs::exists(state_path)) throw CheckpointError("not a checkpoint directory: " + dir);

  std::map<std::string, std::string> kv;
  {
    std::istringstream in(read_text(state_path));
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) continue;
      kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
  }
  auto need = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw CheckpointError(state_path.string() + ": missing " + key);
    return it->second;
  };
  if (to_int("format_version", need("format_version")) != kVersion) {
    throw CheckpointError(state_path.string() + ": unsupported format version");
  }
  NetworkSpec spec;
  spec.stn_base_width = static_cast<int>(to_int("stn_base_width", need("stn_base_width")));
  spec.smn_base_width = static_cast<int>(to_int("smn_base_width", need("smn_base_width")));
  spec.num_residual_blocks =
      static_cast<int>(to_int("num_residual_blocks", need("num_residual_blocks")));
  spec.num_smn_scales = static_cast<int>(to_int("num_smn_scales", need("num_smn_scales")));
  spec.smn_input_channels =
      static_cast<int>(to_int("smn_input_channels", need("smn_input_channels")));
  spec.zero_init_residual = to_int("zero_init_residual", need("zero_init_residual")) != 0;
  {
    const std::string v = need("eta");
    const auto r = std::from_chars(v.data(), v.data() + v.size(), spec.eta);
    if (r.ec != std::errc()) throw CheckpointError("state.txt: bad eta " + v);
  }

  std::map<std::string, Record> records;
  {
    std::ifstream in(bin_path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + bin_path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
      throw CheckpointError(bin_path.string() + ": bad magic");
    }
    if (get_u32(in, bin_path.string()) != kVersion) {
      throw CheckpointError(bin_path.string() + ": unsupported version");
    }
    const std::uint32_t count = get_u32(in, bin_path.string());
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t len = get_u32(in, bin_path.string());
      if (len > 4096) throw CheckpointError(bin_path.string() + ": corrupt record name");
      std::string name(len, '\0');
      if (!in.read(name.data(), len)) throw CheckpointError(bin_path.string() + ": truncated");
      Record r;
      r.shape.n = static_cast<int>(get_u32(in, bin_path.string()));
      r.shape.c = static_cast<int>(get_u32(in, bin_path.string()));
      r.shape.h = static_cast<int>(get_u32(in, bin_path.string()));
      r.shape.w = static_cast<int>(get_u32(in, bin_path.string()));
      r.data.resize(r.shape.numel());
      if (!in.read(reinterpret_cast<char*>(r.data.data()),
                   static_cast<std::streamsize>(r.data.size() * sizeof(float)))) {
        throw CheckpointError(bin_path.string() + ": truncated tensor " + name);
      }
      records.emplace(std::move(name), std::move(r));
    }
  }

  Checkpoint ck;
  ck.nets = Networks::create(spec, 0);
  ck.progress.epochs_done = static_cast<int>(to_int("epochs_done", need("epochs_done")));
  ck.progress.global_step = to_int("global_step", need("global_step"));
  for (NetId id : kAllNets) {
    ParameterSet& ps = ck.nets.get(id);
    ps.set_update_counter(to_int("updates", need(std::string("updates.") + net_name(id))));
    for (auto& p : ps.parameters()) {
      const std::string name = std::string(net_name(id)) + "/" + p.name;
      auto it = records.find(name);
      if (it == records.end()) throw CheckpointError(bin_path.string() + ": missing " + name);
      if (!(it->second.shape == p.value.shape())) {
        throw CheckpointError(bin_path.string() + ": " + name + " has shape " +
                              it->second.shape.str() + ", expected " + p.value.shape().str());
      }
      std::copy(it->second.data.begin(), it->second.data.end(), p.value.mutable_data().begin());
      auto m = records.find(name + "@m");
      auto v = records.find(name + "@v");
      if (m != records.end() && v != records.end()) {
        p.moments.m = std::move(m->second.data);
        p.moments.v = std::move(v->second.data);
      }
      p.moments.step = to_int(name, need("adam_step." + name));
    }
  }
  if (fs::exists(fs::path(dir) / "config.txt")) {
    ck.config_text = read_text(fs::path(dir) / "config.txt");
  }
  return ck;
}

}  // namespace xs
