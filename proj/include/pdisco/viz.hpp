#pragma once

#include <array>
#include <string>

#include "pdisco/metrics.hpp"
#include "pdisco/png_io.hpp"
#include "pdisco/tensor.hpp"

namespace pdisco {

// Fixed 16-color palette so part overlays stay comparable across runs.
inline const std::array<std::array<std::uint8_t, 3>, 16>& part_palette() {
  static const std::array<std::array<std::uint8_t, 3>, 16> colors = {{
      {230, 25, 75},   {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
      {245, 130, 48},  {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
      {210, 245, 60},  {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
      {170, 110, 40},  {255, 250, 200}, {128, 0, 0},    {170, 255, 195},
  }};
  return colors;
}

// Argmax part assignment upsampled nearest-neighbor, each part tinted at 50%
// alpha over the image; background stays unshaded.
inline ImageU8 render_overlay(const ImageU8& image, const PartAssignment& assignment) {
  if (image.channels != 3) throw ConfigError("overlay expects an RGB image");
  const PartAssignment up = upsample_nearest(assignment, image.height, image.width);
  ImageU8 out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const int label = up.at(y, x);
      if (label == 0) continue;
      const auto& color = part_palette()[static_cast<std::size_t>((label - 1) % 16)];
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = static_cast<std::uint8_t>((image.at(y, x, c) + color[c]) / 2);
    }
  return out;
}

// One grayscale soft map per channel, upsampled nearest-neighbor.
inline ImageU8 render_soft_map(const Tensor& attention, int channel, int out_h, int out_w) {
  if (attention.rank() != 3 || channel < 0 || channel >= attention.dim(0))
    throw ConfigError("soft map channel out of range");
  const int h = attention.dim(1), w = attention.dim(2);
  ImageU8 img;
  img.width = out_w;
  img.height = out_h;
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(h - 1, y * h / out_h);
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(w - 1, x * w / out_w);
      const double v = std::clamp(attention.at3(channel, sy, sx), 0.0, 1.0);
      img.pixels[static_cast<std::size_t>(y) * out_w + x] =
          static_cast<std::uint8_t>(v * 255.0 + 0.5);
    }
  }
  return img;
}

}  // namespace pdisco
