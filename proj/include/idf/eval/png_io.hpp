#pragma once

// Minimal PNG reading and writing through libpng: 8-bit RGB color and 16-bit
// single-channel depth.

#include <png.h>

#include <cstdio>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "idf/common.hpp"

namespace idf::eval {

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<std::uint16_t> data;  // interleaved samples, raw integer values
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

inline void png_warn(png_structp, png_const_charp) {}

}  // namespace detail

// Reads any PNG, expanding palettes and stripping alpha. 8-bit files keep
// values in [0,255]; 16-bit files keep their raw values.
inline PngImage read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw LoadError("cannot open " + path);
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_fail, detail::png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("libpng initialization failed for " + path);
  }
  PngImage img;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("bad PNG " + path + ": " + err);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);  // native little-endian samples
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * std::size_t(img.height));
  rows.resize(std::size_t(img.height));
  for (int r = 0; r < img.height; ++r) rows[std::size_t(r)] = buffer.data() + stride * std::size_t(r);
  // re-arm after the allocations above so no C++ object changes between
  // the jump point and a decoding error
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("bad PNG " + path + ": " + err);
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = std::size_t(img.width) * img.height * img.channels;
  img.data.resize(n);
  for (int r = 0; r < img.height; ++r) {
    const unsigned char* row = rows[std::size_t(r)];
    for (std::size_t k = 0; k < std::size_t(img.width) * img.channels; ++k) {
      std::uint16_t v;
      if (img.bit_depth == 16) {
        v = static_cast<std::uint16_t>(row[2 * k] | (row[2 * k + 1] << 8));
      } else {
        v = row[k];
      }
      img.data[std::size_t(r) * img.width * img.channels + k] = v;
    }
  }
  return img;
}

// channels 1 or 3, bit_depth 8 or 16; samples taken from img.data.
inline void write_png(const std::string& path, const PngImage& img) {
  require(img.channels == 1 || img.channels == 3, "write_png: 1 or 3 channels");
  require(img.bit_depth == 8 || img.bit_depth == 16, "write_png: bit depth 8 or 16");
  require(img.data.size() == std::size_t(img.width) * img.height * img.channels, "write_png: data size");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw LoadError("cannot write " + path);
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_fail, detail::png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw LoadError("libpng initialization failed for " + path);
  }
  const std::size_t bytes = img.bit_depth / 8;
  const std::size_t stride = std::size_t(img.width) * img.channels * bytes;
  std::vector<unsigned char> buffer(stride * std::size_t(img.height));
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    if (bytes == 2) {  // PNG stores big-endian samples
      buffer[2 * i] = static_cast<unsigned char>(img.data[i] >> 8);
      buffer[2 * i + 1] = static_cast<unsigned char>(img.data[i] & 0xFF);
    } else {
      buffer[i] = static_cast<unsigned char>(img.data[i]);
    }
  }
  std::vector<png_bytep> rows(std::size_t(img.height));
  for (int r = 0; r < img.height; ++r) rows[std::size_t(r)] = buffer.data() + stride * std::size_t(r);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw LoadError("cannot encode PNG " + path + ": " + err);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), img.bit_depth,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace idf::eval
