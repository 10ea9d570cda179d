// SPDX-License-Identifier: Apache-2.0
//
// Minimal libpng wrappers: 8-bit RGB and 16-bit grayscale, read and write.
#pragma once

#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "rcfusion/error.hpp"

namespace rcf {

struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels

  Image8() = default;
  Image8(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const Image8&) const = default;
};

/// Raw depth, 0 marks a missing measurement.
struct DepthMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> values;

  DepthMap() = default;
  DepthMap(std::size_t h, std::size_t w, std::uint16_t fill = 0) : height(h), width(w), values(h * w, fill) {}

  std::uint16_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::uint16_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  bool operator==(const DepthMap&) const = default;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError(std::string("cannot open ") + path.string());
  return f;
}

struct PngDecoded {
  std::uint32_t width = 0, height = 0;
  int bit_depth = 0, color_type = 0;
  std::vector<std::uint8_t> rows;  // tightly packed after transforms
  std::size_t rowbytes = 0;
};

inline PngDecoded decode_png(const std::filesystem::path& path, bool want_rgb8) {
  auto file = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed for " + path.string());
  }
  PngDecoded out;
  std::vector<png_bytep> row_ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unreadable PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  out.color_type = png_get_color_type(png, info);
  if (want_rgb8) {
    if (out.bit_depth == 16) png_set_strip_16(png);
    if (out.color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (out.color_type == PNG_COLOR_TYPE_GRAY || out.color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
      if (out.bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
      png_set_gray_to_rgb(png);
    }
    if (out.color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  } else {
    if (out.color_type != PNG_COLOR_TYPE_GRAY || out.bit_depth != 16) {
      png_destroy_read_struct(&png, &info, nullptr);
      throw IoError("depth PNG must be 16-bit grayscale: " + path.string());
    }
    png_set_swap(png);  // host little-endian order for memcpy below
  }
  png_read_update_info(png, info);
  out.rowbytes = png_get_rowbytes(png, info);
  out.rows.resize(out.rowbytes * out.height);
  row_ptrs.resize(out.height);
  for (std::uint32_t y = 0; y < out.height; ++y) row_ptrs[y] = out.rows.data() + y * out.rowbytes;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline void encode_png(const std::filesystem::path& path, std::uint32_t width, std::uint32_t height,
                       int bit_depth, int color_type, std::vector<std::uint8_t>& rows,
                       std::size_t rowbytes) {
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed for " + path.string());
  }
  std::vector<png_bytep> row_ptrs(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  for (std::uint32_t y = 0; y < height; ++y) row_ptrs[y] = rows.data() + y * rowbytes;
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline Image8 read_png_rgb8(const std::filesystem::path& path) {
  auto d = detail::decode_png(path, true);
  Image8 img(d.height, d.width, 3);
  for (std::size_t y = 0; y < d.height; ++y)
    std::copy_n(d.rows.data() + y * d.rowbytes, d.width * 3, img.pixels.data() + y * d.width * 3);
  return img;
}

inline DepthMap read_png_gray16(const std::filesystem::path& path) {
  auto d = detail::decode_png(path, false);
  DepthMap depth(d.height, d.width);
  for (std::size_t y = 0; y < d.height; ++y)
    for (std::size_t x = 0; x < d.width; ++x) {
      const auto* p = d.rows.data() + y * d.rowbytes + 2 * x;
      depth.at(y, x) = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }
  return depth;
}

inline void write_png_rgb8(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 3) throw IoError("write_png_rgb8 needs a 3-channel image");
  std::vector<std::uint8_t> rows = img.pixels;
  detail::encode_png(path, static_cast<std::uint32_t>(img.width),
                     static_cast<std::uint32_t>(img.height), 8, PNG_COLOR_TYPE_RGB, rows,
                     img.width * 3);
}

inline void write_png_gray16(const std::filesystem::path& path, const DepthMap& depth) {
  std::vector<std::uint8_t> rows(depth.values.size() * 2);
  for (std::size_t i = 0; i < depth.values.size(); ++i) {
    rows[2 * i] = static_cast<std::uint8_t>(depth.values[i] & 0xFF);
    rows[2 * i + 1] = static_cast<std::uint8_t>(depth.values[i] >> 8);
  }
  detail::encode_png(path, static_cast<std::uint32_t>(depth.width),
                     static_cast<std::uint32_t>(depth.height), 16, PNG_COLOR_TYPE_GRAY, rows,
                     depth.width * 2);
}

}  // namespace rcf
