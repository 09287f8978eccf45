#pragma once

#include <cmath>
#include <string>

#include "pdisco/autodiff.hpp"
#include "pdisco/errors.hpp"
#include "pdisco/rng.hpp"
#include "pdisco/tensor.hpp"

namespace pdisco {

// Rigid-ish transform about the grid center; translation is a fraction of the
// grid size so the same transform applies at image and patch resolution.
struct AffineTransform {
  double rotation = 0.0;  // radians
  double scale = 1.0;
  double translate_x = 0.0;
  double translate_y = 0.0;
};

struct AffineRanges {
  double rotation_min = -M_PI / 6.0, rotation_max = M_PI / 6.0;
  double scale_min = 0.8, scale_max = 1.2;
  double translate_min = -0.1, translate_max = 0.1;

  void validate() const {
    if (rotation_min > rotation_max || scale_min > scale_max || translate_min > translate_max)
      throw ConfigError("affine range has min > max");
    if (scale_min <= 0.0) throw ConfigError("affine scale range must be positive");
  }
};

inline AffineTransform sample_affine(RandomSource& rng, const AffineRanges& ranges) {
  ranges.validate();
  AffineTransform t;
  t.rotation = rng.uniform(ranges.rotation_min, ranges.rotation_max);
  t.scale = rng.uniform(ranges.scale_min, ranges.scale_max);
  t.translate_x = rng.uniform(ranges.translate_min, ranges.translate_max);
  t.translate_y = rng.uniform(ranges.translate_min, ranges.translate_max);
  return t;
}

// Bilinear resampling plan for applying t (or its inverse) on an h x w grid.
// Out-of-canvas source positions contribute nothing, i.e. read as zero.
inline SpatialMap warp_map(int h, int w, const AffineTransform& t, bool inverse) {
  if (h < 2 || w < 2) throw ConfigError("warp grid must be at least 2x2");
  const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
  const double tx = t.translate_x * w, ty = t.translate_y * h;
  const double c = std::cos(t.rotation), s = std::sin(t.rotation);

  SpatialMap map(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double x = j - cx, y = i - cy;
      double xs, ys;
      if (!inverse) {
        // output = content moved by t, so sample the source at t^{-1}(p)
        const double ux = (x - tx) / t.scale, uy = (y - ty) / t.scale;
        xs = c * ux + s * uy;
        ys = -s * ux + c * uy;
      } else {
        xs = t.scale * (c * x - s * y) + tx;
        ys = t.scale * (s * x + c * y) + ty;
      }
      xs += cx;
      ys += cy;
      const int x0 = static_cast<int>(std::floor(xs)), y0 = static_cast<int>(std::floor(ys));
      const double dx = xs - x0, dy = ys - y0;
      auto& taps = map[static_cast<std::size_t>(i) * w + j];
      auto push = [&](int yy, int xx, double weight) {
        if (weight > 0.0 && xx >= 0 && xx < w && yy >= 0 && yy < h)
          taps.push_back(SpatialTap{yy * w + xx, weight});
      };
      push(y0, x0, (1.0 - dx) * (1.0 - dy));
      push(y0, x0 + 1, dx * (1.0 - dy));
      push(y0 + 1, x0, (1.0 - dx) * dy);
      push(y0 + 1, x0 + 1, dx * dy);
    }
  }
  return map;
}

// maps: (c, h, w). Returns the resampled stack of the same shape.
inline Tensor warp(const Tensor& maps, const AffineTransform& t, bool inverse) {
  if (maps.rank() != 3) throw ConfigError("warp expects a (c,h,w) tensor");
  const int c = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  const SpatialMap map = warp_map(h, w, t, inverse);
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    const double* src = maps.data() + static_cast<std::size_t>(ch) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(ch) * h * w;
    for (int o = 0; o < h * w; ++o) {
      double v = 0.0;
      for (const SpatialTap& tap : map[o]) v += tap.weight * src[tap.src];
      dst[o] = v;
    }
  }
  return out;
}

}  // namespace pdisco
