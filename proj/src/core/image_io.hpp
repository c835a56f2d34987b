#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace xs {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Interleaved raster with 1 or 3 channels and 8- or 16-bit samples.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;  // row-major, channel-interleaved

  std::uint16_t at(int x, int y, int c) const {
    return samples[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// PNG files. Alpha is dropped on read; palette and sub-byte images are
// expanded to 8 bits.
Raster read_png(const std::string& path);
void write_png(const std::string& path, const Raster& image);

}  // namespace xs
