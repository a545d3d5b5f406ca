#pragma once

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <string>
#include <vector>

#include "evssl/common.hpp"
#include "evssl/event.hpp"

namespace evssl {

struct ImageU8 {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> pixels;  // [height, width]

  uint8_t at(int64_t y, int64_t x) const {
    return pixels[static_cast<size_t>(y * width + x)];
  }
};

namespace detail {

struct FileCloser {
  std::FILE* f = nullptr;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

// Reads any 8/16-bit gray/palette/RGB(A) PNG and returns 8-bit grayscale.
// Color inputs are converted with the BT.601 luma weights, rounded.
inline ImageU8 read_png_gray(const std::string& path) {
  detail::FileCloser fc{std::fopen(path.c_str(), "rb")};
  require(fc.f != nullptr, ErrorKind::Data, cat("cannot open PNG '", path, "'"));
  png_byte sig[8];
  require(std::fread(sig, 1, 8, fc.f) == 8 && png_sig_cmp(sig, 0, 8) == 0,
          ErrorKind::Data, cat("'", path, "' is not a PNG file"));

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, ErrorKind::Data, "libpng: failed to allocate read struct");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw_data("libpng: failed to allocate info struct");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw_data(cat("failed to decode PNG '", path, "'"));
  }
  png_init_io(png, fc.f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);
  if (png_get_channels(png, info) == 4 || png_get_channels(png, info) == 2) {
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
  }

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int channels = png_get_channels(png, info);
  std::vector<uint8_t> raw(static_cast<size_t>(w) * h * static_cast<size_t>(channels));
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = raw.data() + static_cast<size_t>(y) * w * static_cast<size_t>(channels);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  ImageU8 img;
  img.width = w;
  img.height = h;
  img.pixels.resize(static_cast<size_t>(w) * h);
  if (channels == 1) {
    img.pixels = std::move(raw);
  } else {
    require(channels == 3, ErrorKind::Data,
            cat("'", path, "': unsupported channel count ", channels));
    for (size_t i = 0; i < img.pixels.size(); ++i) {
      const uint32_t r = raw[i * 3], g = raw[i * 3 + 1], b = raw[i * 3 + 2];
      img.pixels[i] = static_cast<uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
    }
  }
  return img;
}

namespace detail {

inline void write_png(const std::string& path, int64_t width, int64_t height,
                      int color_type, int channels, const uint8_t* data) {
  require(width > 0 && height > 0, ErrorKind::Usage,
          "write_png: image dimensions must be positive");
  FileCloser fc{std::fopen(path.c_str(), "wb")};
  require(fc.f != nullptr, ErrorKind::Data, cat("cannot open '", path, "' for writing"));
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, ErrorKind::Data, "libpng: failed to allocate write struct");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw_data("libpng: failed to allocate info struct");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw_data(cat("failed to encode PNG '", path, "'"));
  }
  png_init_io(png, fc.f);
  // Pinned encoder settings keep output bytes reproducible run to run.
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(height));
  for (int64_t y = 0; y < height; ++y)
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(
        data + static_cast<size_t>(y) * static_cast<size_t>(width) * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline void write_png_gray(const std::string& path, const ImageU8& img) {
  require(static_cast<int64_t>(img.pixels.size()) == img.width * img.height,
          ErrorKind::Usage, "write_png_gray: pixel buffer size mismatch");
  detail::write_png(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, 1,
                    img.pixels.data());
}

inline void write_png_rgb(const std::string& path, const ImageRgb8& img) {
  require(static_cast<int64_t>(img.pixels.size()) == img.width * img.height * 3,
          ErrorKind::Usage, "write_png_rgb: pixel buffer size mismatch");
  detail::write_png(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 3,
                    img.pixels.data());
}

}  // namespace evssl
