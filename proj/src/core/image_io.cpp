#include "image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace xs {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

}  // namespace

Raster read_png(const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open image " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("not a PNG file: " + path);
  }
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed for " + path);
  }
  Raster img;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed to decode " + path + ": " + error);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_strip_alpha(png);
  }
  if (depth == 16) png_set_swap(png);  // host little-endian samples
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  buffer.resize(row_bytes * img.height);
  rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t count = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.samples.resize(count);
  if (img.bit_depth == 16) {
    for (std::size_t i = 0; i < count; ++i) {
      img.samples[i] = static_cast<std::uint16_t>(buffer[2 * i] | (buffer[2 * i + 1] << 8));
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) img.samples[i] = buffer[i];
  }
  // Row padding never occurs for 8/16-bit data, so the flat copy above is exact.
  return img;
}

void write_png(const std::string& path, const Raster& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw IoError("write_png: unsupported channel count " + std::to_string(img.channels));
  }
  if (img.bit_depth != 8 && img.bit_depth != 16) {
    throw IoError("write_png: unsupported bit depth " + std::to_string(img.bit_depth));
  }
  const std::size_t count = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (img.samples.size() != count) throw IoError("write_png: sample count mismatch");
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot write image " + path);
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed for " + path);
  }
  const int bytes = img.bit_depth / 8;
  std::vector<unsigned char> buffer(count * bytes);
  for (std::size_t i = 0; i < count; ++i) {
    if (bytes == 2) {
      buffer[2 * i] = static_cast<unsigned char>(img.samples[i] >> 8);  // PNG is big-endian
      buffer[2 * i + 1] = static_cast<unsigned char>(img.samples[i] & 0xff);
    } else {
      buffer[i] = static_cast<unsigned char>(img.samples[i]);
    }
  }
  std::vector<png_bytep> rows(img.height);
  const std::size_t row_bytes = static_cast<std::size_t>(img.width) * img.channels * bytes;
  for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * row_bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed to encode " + path + ": " + error);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, img.width, img.height, img.bit_depth,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace xs
