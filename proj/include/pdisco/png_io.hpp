#pragma once

// Minimal PNG codec over zlib: 8-bit grayscale and RGB, no interlacing.
// Covers exactly what the dataset layout and the visualizer need.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pdisco/errors.hpp"

namespace pdisco {

struct ImageU8 {
  int width = 0, height = 0, channels = 0;  // 1 = gray, 3 = rgb
  std::vector<std::uint8_t> pixels;         // row-major, interleaved

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

namespace png_detail {

inline const std::uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

inline void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

inline std::uint32_t get_u32_be(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                         const std::vector<std::uint8_t>& data) {
  put_u32_be(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uLong crc =
      ::crc32(0L, out.data() + type_at, static_cast<uInt>(4 + data.size()));
  put_u32_be(out, static_cast<std::uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace png_detail

inline void write_png(const std::string& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ConfigError("write_png supports 1 or 3 channels");
  if (img.width <= 0 || img.height <= 0 ||
      img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw ConfigError("write_png: pixel buffer does not match dimensions");

  const int stride = img.width * img.channels;
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (stride + 1));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    const std::uint8_t* row = img.pixels.data() + static_cast<std::size_t>(y) * stride;
    raw.insert(raw.end(), row, row + stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png deflate failed for " + path);
  compressed.resize(bound);

  std::vector<std::uint8_t> out(png_detail::kSignature, png_detail::kSignature + 8);
  std::vector<std::uint8_t> ihdr;
  png_detail::put_u32_be(ihdr, static_cast<std::uint32_t>(img.width));
  png_detail::put_u32_be(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);                                   // bit depth
  ihdr.push_back(img.channels == 3 ? 2 : 0);           // color type
  ihdr.push_back(0);                                   // compression
  ihdr.push_back(0);                                   // filter
  ihdr.push_back(0);                                   // interlace
  png_detail::append_chunk(out, "IHDR", ihdr);
  png_detail::append_chunk(out, "IDAT", compressed);
  png_detail::append_chunk(out, "IEND", {});

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot open " + path + " for writing");
  file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("short write to " + path);
}

inline ImageU8 read_png(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), png_detail::kSignature, 8) != 0)
    throw FormatError(path + ": not a PNG file");

  ImageU8 img;
  std::vector<std::uint8_t> idat;
  bool saw_ihdr = false;
  std::size_t at = 8;
  while (at + 8 <= bytes.size()) {
    const std::uint32_t len = png_detail::get_u32_be(bytes.data() + at);
    if (at + 12 + len > bytes.size()) throw FormatError(path + ": truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + at + 4);
    const std::uint8_t* data = bytes.data() + at + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw FormatError(path + ": bad IHDR");
      img.width = static_cast<int>(png_detail::get_u32_be(data));
      img.height = static_cast<int>(png_detail::get_u32_be(data + 4));
      const int depth = data[8], color = data[9], interlace = data[12];
      if (depth != 8) throw FormatError(path + ": only 8-bit PNGs are supported");
      if (color == 0)
        img.channels = 1;
      else if (color == 2)
        img.channels = 3;
      else
        throw FormatError(path + ": unsupported color type " + std::to_string(color) +
                          " (need 8-bit grayscale or RGB)");
      if (interlace != 0) throw FormatError(path + ": interlaced PNGs are not supported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    at += 12 + len;
  }
  if (!saw_ihdr || img.width <= 0 || img.height <= 0)
    throw FormatError(path + ": missing image header");

  const int stride = img.width * img.channels;
  const std::size_t raw_size = static_cast<std::size_t>(img.height) * (stride + 1);
  std::vector<std::uint8_t> raw(raw_size);
  uLongf out_len = static_cast<uLongf>(raw_size);
  const int rc = uncompress(raw.data(), &out_len, idat.data(), static_cast<uLong>(idat.size()));
  if (rc != Z_OK || out_len != raw_size)
    throw FormatError(path + ": PNG inflate failed (zlib rc " + std::to_string(rc) + ")");

  img.pixels.assign(static_cast<std::size_t>(img.height) * stride, 0);
  const int bpp = img.channels;
  std::vector<std::uint8_t> prev(stride, 0);
  for (int y = 0; y < img.height; ++y) {
    const std::uint8_t filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
    const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
    std::uint8_t* dst = img.pixels.data() + static_cast<std::size_t>(y) * stride;
    for (int x = 0; x < stride; ++x) {
      const int left = x >= bpp ? dst[x - bpp] : 0;
      const int up = prev[x];
      const int up_left = x >= bpp ? prev[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += up; break;
        case 3: v += (left + up) / 2; break;
        case 4: v += png_detail::paeth(left, up, up_left); break;
        default: throw FormatError(path + ": unknown PNG filter " + std::to_string(filter));
      }
      dst[x] = static_cast<std::uint8_t>(v & 0xFF);
    }
    std::memcpy(prev.data(), dst, static_cast<std::size_t>(stride));
  }
  return img;
}

}  // namespace pdisco
