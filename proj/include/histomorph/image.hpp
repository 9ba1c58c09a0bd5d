#pragma once

#include <png.h>
#include <zlib.h>

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace histomorph {

// Interleaved 8-bit RGB raster.
struct ImageRGB {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;  // height*width*3

  ImageRGB() = default;
  ImageRGB(int w, int h, uint8_t fill = 0) : width(w), height(h), data(size_t(w) * h * 3, fill) {}

  uint8_t& at(int x, int y, int c) { return data[(size_t(y) * width + x) * 3 + c]; }
  uint8_t at(int x, int y, int c) const { return data[(size_t(y) * width + x) * 3 + c]; }
  bool empty() const { return width == 0 || height == 0; }
};

// Single-channel 16-bit label raster.
struct ImageLabel {
  int width = 0;
  int height = 0;
  std::vector<uint16_t> data;

  ImageLabel() = default;
  ImageLabel(int w, int h, uint16_t fill = 0) : width(w), height(h), data(size_t(w) * h, fill) {}

  uint16_t& at(int x, int y) { return data[size_t(y) * width + x]; }
  uint16_t at(int x, int y) const { return data[size_t(y) * width + x]; }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline ImageRGB read_png_rgb(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::invalid_argument("png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png: decode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  ImageRGB img(int(png_get_image_width(png, info)), int(png_get_image_height(png, info)));
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = img.data.data() + size_t(y) * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png_rgb(const std::string& path, const ImageRGB& img, int compression = 1) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("png: cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png: encode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_compression_level(png, compression);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(img.data.data() + size_t(y) * img.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline ImageLabel read_png_label16(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::invalid_argument("png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png: decode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if (png_get_bit_depth(png, info) < 16) png_set_expand_16(png);
  png_set_strip_alpha(png);
  png_set_swap(png);  // PNG is big-endian on disk
  png_read_update_info(png, info);

  ImageLabel img(int(png_get_image_width(png, info)), int(png_get_image_height(png, info)));
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = reinterpret_cast<png_bytep>(img.data.data() + size_t(y) * img.width);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png_label16(const std::string& path, const ImageLabel& img) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("png: cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png: encode failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_compression_level(png, 1);
  png_set_IHDR(png, info, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_set_swap(png);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = reinterpret_cast<png_bytep>(const_cast<uint16_t*>(img.data.data()) + size_t(y) * img.width);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

namespace detail {

// Classic TIFF reader restricted to what the tile contract allows:
// 8-bit RGB, chunky planar layout, strip-organized, compression none or deflate.
inline ImageRGB read_tiff_rgb(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("tiff: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 8) throw std::invalid_argument("tiff: truncated " + path);

  bool little;
  if (buf[0] == 'I' && buf[1] == 'I')
    little = true;
  else if (buf[0] == 'M' && buf[1] == 'M')
    little = false;
  else
    throw std::invalid_argument("tiff: bad byte order mark in " + path);

  auto rd16 = [&](size_t off) -> uint32_t {
    if (off + 2 > buf.size()) throw std::invalid_argument("tiff: truncated " + path);
    return little ? buf[off] | (buf[off + 1] << 8) : (buf[off] << 8) | buf[off + 1];
  };
  auto rd32 = [&](size_t off) -> uint32_t {
    if (off + 4 > buf.size()) throw std::invalid_argument("tiff: truncated " + path);
    return little ? buf[off] | (buf[off + 1] << 8) | (buf[off + 2] << 16) | (uint32_t(buf[off + 3]) << 24)
                  : (uint32_t(buf[off]) << 24) | (buf[off + 1] << 16) | (buf[off + 2] << 8) | buf[off + 3];
  };
  if (rd16(2) != 42) throw std::invalid_argument("tiff: bad magic in " + path);

  uint32_t width = 0, height = 0, compression = 1, rows_per_strip = 0xFFFFFFFFu, spp = 1;
  std::vector<uint32_t> strip_offsets, strip_counts;

  size_t ifd = rd32(4);
  uint32_t n_entries = rd16(ifd);
  auto read_values = [&](size_t entry, std::vector<uint32_t>& out) {
    uint32_t type = rd16(entry + 2);
    uint32_t count = rd32(entry + 4);
    size_t unit = (type == 3) ? 2 : 4;
    size_t pos = (unit * count <= 4) ? entry + 8 : rd32(entry + 8);
    for (uint32_t i = 0; i < count; ++i)
      out.push_back(type == 3 ? rd16(pos + 2 * i) : rd32(pos + 4 * i));
  };
  for (uint32_t e = 0; e < n_entries; ++e) {
    size_t entry = ifd + 2 + size_t(e) * 12;
    uint32_t tag = rd16(entry);
    std::vector<uint32_t> v;
    switch (tag) {
      case 256: read_values(entry, v); width = v.at(0); break;
      case 257: read_values(entry, v); height = v.at(0); break;
      case 258:
        read_values(entry, v);
        for (uint32_t b : v)
          if (b != 8) throw std::invalid_argument("tiff: only 8-bit samples supported: " + path);
        break;
      case 259: read_values(entry, v); compression = v.at(0); break;
      case 273: read_values(entry, strip_offsets); break;
      case 277: read_values(entry, v); spp = v.at(0); break;
      case 278: read_values(entry, v); rows_per_strip = v.at(0); break;
      case 279: read_values(entry, strip_counts); break;
      case 284:
        read_values(entry, v);
        if (v.at(0) != 1) throw std::invalid_argument("tiff: planar layout unsupported: " + path);
        break;
      default: break;
    }
  }
  if (width == 0 || height == 0 || strip_offsets.empty())
    throw std::invalid_argument("tiff: missing required tags in " + path);
  if (spp != 3) throw std::invalid_argument("tiff: expected 3 samples per pixel in " + path);
  if (compression != 1 && compression != 8 && compression != 32946)
    throw std::invalid_argument("tiff: only uncompressed or deflate supported: " + path);

  ImageRGB img{int(width), int(height)};
  size_t row_bytes = size_t(width) * 3;
  uint32_t row = 0;
  for (size_t s = 0; s < strip_offsets.size(); ++s) {
    uint32_t strip_rows = std::min<uint32_t>(rows_per_strip, height - row);
    size_t need = row_bytes * strip_rows;
    uint8_t* dst = img.data.data() + size_t(row) * row_bytes;
    size_t off = strip_offsets[s];
    size_t cnt = s < strip_counts.size() ? strip_counts[s] : need;
    if (off + cnt > buf.size()) throw std::invalid_argument("tiff: strip out of bounds in " + path);
    if (compression == 1) {
      if (cnt < need) throw std::invalid_argument("tiff: short strip in " + path);
      std::memcpy(dst, buf.data() + off, need);
    } else {
      uLongf out_len = need;
      if (uncompress(dst, &out_len, buf.data() + off, cnt) != Z_OK || out_len != need)
        throw std::invalid_argument("tiff: deflate strip decode failed in " + path);
    }
    row += strip_rows;
  }
  return img;
}

}  // namespace detail

// Dispatch on file extension; tiles may be PNG or (restricted) TIFF.
inline ImageRGB read_tile_rgb(const std::string& path) {
  auto ext = std::filesystem::path(path).extension().string();
  for (auto& c : ext) c = char(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".tif" || ext == ".tiff") return detail::read_tiff_rgb(path);
  return read_png_rgb(path);
}

}  // namespace histomorph
