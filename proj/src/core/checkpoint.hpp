#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "networks.hpp"

namespace xs {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainProgress {
  int epochs_done = 0;
  std::int64_t global_step = 0;
};

// A checkpoint is a directory:
//   weights.bin   "XSCK", u32 version, u32 count, then per tensor:
//                 u32 name length, name, 4 x i32 dims, little-endian f32 data.
//                 Adam moments are stored as "<net>/<param>@m" and "@v".
//   state.txt     key = value: network spec, progress, update counters and
//                 per-parameter Adam step counts.
//   config.txt    the resolved training config (informational; optional).
void save_checkpoint(const std::string& dir, const Networks& nets, const TrainProgress& progress,
                     const std::string& config_text = {});

struct Checkpoint {
  Networks nets;
  TrainProgress progress;
  std::string config_text;  // empty when absent
};

Checkpoint load_checkpoint(const std::string& dir);

}  // namespace xs
