#pragma once

// Synthetic part-structured dataset generator and the generic on-disk layout:
// images/<id>.png, masks/<id>.png, keypoints.csv, labels.csv, split.csv.
// Each image holds one object (or a few) assembled from colored parts: part
// hue identifies the part across the dataset, a class-specific tint makes the
// classes separable by color alone.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pdisco/errors.hpp"
#include "pdisco/metrics.hpp"
#include "pdisco/png_io.hpp"
#include "pdisco/rng.hpp"
#include "pdisco/tensor.hpp"

namespace pdisco {

struct SynthSpec {
  int classes = 8;
  int parts_per_object = 4;
  int images_per_class = 250;
  int image_side = 64;
  std::uint64_t seed = 42;
  bool multi_instance = false;
  bool irregular_parts = false;

  void validate() const {
    if (classes < 2) throw ConfigError("need at least 2 classes");
    if (parts_per_object < 1) throw ConfigError("need at least 1 part per object");
    if (images_per_class < 1) throw ConfigError("need at least 1 image per class");
    if (image_side < 16) throw ConfigError("image side must be at least 16");
  }

  int total_images() const { return classes * images_per_class; }
};

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw FormatError("unknown split '" + s + "'");
}

struct AnnotatedSample {
  std::string id;
  int class_id = 0;
  int side = 0;
  std::vector<std::uint8_t> pixels;     // channel-major (3,S,S)
  std::vector<std::uint8_t> part_mask;  // S*S, 0 = background, 1..P = part id
  std::vector<std::uint8_t> fg_mask;    // S*S, part_mask > 0
  std::vector<Keypoint> keypoints;
  Split split = Split::train;

  Tensor image_tensor() const {
    Tensor t({3, side, side});
    for (int i = 0; i < t.numel(); ++i) t[i] = pixels[i] / 255.0;
    return t;
  }
};

struct Dataset {
  std::string root;
  int image_side = 0;
  int num_classes = 0;
  int num_parts = 0;
  bool has_keypoints = false;
  std::vector<AnnotatedSample> samples;

  std::vector<int> split_indices(Split s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == s) out.push_back(static_cast<int>(i));
    return out;
  }
};

namespace synth_detail {

inline std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return buf;
}

// deterministic hash split: 70/10/20 stable under regeneration with more images
inline Split split_of(std::uint64_t seed, int index) {
  const std::uint64_t h = hash_mix({seed, static_cast<std::uint64_t>(index), 0x5EEDULL});
  const int bucket = static_cast<int>(h % 100);
  if (bucket < 70) return Split::train;
  if (bucket < 80) return Split::val;
  return Split::test;
}

struct Rgb {
  double r, g, b;
};

inline Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1.0 - s), q = v * (1.0 - f * s), t = v * (1.0 - (1.0 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// fixed hue wheel for parts; class tint walks the wheel by the golden ratio
inline Rgb part_base_color(int part_id) { return hsv(0.03 + (part_id - 1) * 0.23, 0.9, 0.92); }
inline Rgb class_tint(int class_id) { return hsv(0.61803398875 * class_id, 0.85, 0.8); }

inline constexpr double kPartColorWeight = 0.68;  // rest is the class tint

struct PartShape {
  int part_id = 0;
  double cx = 0, cy = 0;      // pixels
  double a = 1, b = 1;        // semi-axes, pixels
  double angle = 0;           // radians
  int kind = 0;               // 0 ellipse, 1 elongated, 2 crescent
};

inline bool inside(const PartShape& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  const double ca = std::cos(-s.angle), sa = std::sin(-s.angle);
  const double lx = ca * dx - sa * dy, ly = sa * dx + ca * dy;
  const double outer = (lx / s.a) * (lx / s.a) + (ly / s.b) * (ly / s.b);
  if (outer > 1.0) return false;
  if (s.kind == 2) {
    // crescent: carve out a shifted copy of the ellipse
    const double ix = lx - 0.55 * s.a, iy = ly;
    const double ia = 0.78 * s.a, ib = 0.95 * s.b;
    if ((ix / ia) * (ix / ia) + (iy / ib) * (iy / ib) <= 1.0) return false;
  }
  return true;
}

}  // namespace synth_detail

// Renders one sample; pure function of (spec, index).
inline AnnotatedSample synthesize_sample(const SynthSpec& spec, int index) {
  using namespace synth_detail;
  const int s = spec.image_side;
  RandomSource rng(hash_mix({spec.seed, static_cast<std::uint64_t>(index), 0xA11CEULL}));

  AnnotatedSample sample;
  sample.id = sample_id(index);
  sample.class_id = index / spec.images_per_class;
  sample.side = s;
  sample.split = split_of(spec.seed, index);
  sample.pixels.assign(static_cast<std::size_t>(3) * s * s, 0);
  sample.part_mask.assign(static_cast<std::size_t>(s) * s, 0);
  sample.fg_mask.assign(static_cast<std::size_t>(s) * s, 0);

  // dull class-independent background with low-frequency shading so its
  // feature cluster is wide rather than a single tight mode
  const double bg = rng.uniform(0.06, 0.18);
  const double wave_ax = rng.uniform(0.5, 2.5), wave_ay = rng.uniform(0.5, 2.5);
  const double wave_bx = rng.uniform(2.0, 5.0), wave_by = rng.uniform(2.0, 5.0);
  const double phase_a = rng.uniform(0.0, 2.0 * M_PI), phase_b = rng.uniform(0.0, 2.0 * M_PI);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double shade =
          0.05 * std::sin(2.0 * M_PI * (wave_ax * x + wave_ay * y) / s + phase_a) +
          0.04 * std::sin(2.0 * M_PI * (wave_bx * x - wave_by * y) / s + phase_b);
      for (int c = 0; c < 3; ++c) {
        const double v = bg + shade + rng.uniform(-0.02, 0.02);
        sample.pixels[static_cast<std::size_t>(c) * s * s + y * s + x] =
            static_cast<std::uint8_t>(std::clamp(v, 0.0, 0.35) * 255.0 + 0.5);
      }
    }

  const int instances = spec.multi_instance ? 2 + static_cast<int>(rng.uniform_index(2)) : 1;
  const double inst_scale = spec.multi_instance ? 0.55 : 1.0;

  std::vector<PartShape> shapes;
  std::vector<std::pair<double, double>> centers;
  for (int inst = 0; inst < instances; ++inst) {
    double cx = 0, cy = 0;
    for (int attempt = 0; attempt < 24; ++attempt) {
      cx = rng.uniform(0.46, 0.54) * s;
      cy = rng.uniform(0.46, 0.54) * s;
      bool ok = true;
      for (auto [ox, oy] : centers)
        ok = ok && std::hypot(cx - ox, cy - oy) > 0.28 * s;
      if (ok) break;
    }
    centers.emplace_back(cx, cy);
    const double pose = rng.uniform(0.0, 2.0 * M_PI);
    const double scale = rng.uniform(0.85, 1.05) * inst_scale;

    // one big body lobe plus fat appendage lobes; blobs this size keep most
    // of their cells interior at the 8-pixel patch quantization the
    // evaluation runs at
    PartShape body;
    body.part_id = 1;
    body.cx = cx;
    body.cy = cy;
    body.a = 0.30 * s * scale;
    body.b = 0.26 * s * scale;
    body.angle = pose;
    shapes.push_back(body);

    const int appendages = spec.parts_per_object - 1;
    for (int p = 0; p < appendages; ++p) {
      const double theta = pose + 2.0 * M_PI * p / std::max(1, appendages);
      PartShape limb;
      limb.part_id = p + 2;
      limb.cx = cx + 0.50 * s * scale * std::cos(theta);
      limb.cy = cy + 0.50 * s * scale * std::sin(theta);
      limb.angle = theta;
      if (spec.irregular_parts && p % 2 == 1) {
        limb.kind = 2;  // crescent
        limb.a = 0.23 * s * scale;
        limb.b = 0.19 * s * scale;
      } else if (spec.irregular_parts) {
        limb.kind = 1;  // elongated
        limb.a = 0.26 * s * scale;
        limb.b = 0.08 * s * scale;
      } else {
        limb.a = 0.26 * s * scale;
        limb.b = 0.22 * s * scale;
      }
      shapes.push_back(limb);
        }
  }

  // paint first-come-first-served so part masks stay disjoint
  const Rgb tint = class_tint(sample.class_id);
  for (const PartShape& shape : shapes) {
    const Rgb base = part_base_color(shape.part_id);
    const Rgb color = {kPartColorWeight * base.r + (1 - kPartColorWeight) * tint.r,
                       kPartColorWeight * base.g + (1 - kPartColorWeight) * tint.g,
                       kPartColorWeight * base.b + (1 - kPartColorWeight) * tint.b};
    const int x0 = std::max(0, static_cast<int>(shape.cx - shape.a - shape.b - 2));
    const int x1 = std::min(s - 1, static_cast<int>(shape.cx + shape.a + shape.b + 2));
    const int y0 = std::max(0, static_cast<int>(shape.cy - shape.a - shape.b - 2));
    const int y1 = std::min(s - 1, static_cast<int>(shape.cy + shape.a + shape.b + 2));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const int at = y * s + x;
        if (sample.part_mask[at] != 0) continue;
        if (!inside(shape, x + 0.5, y + 0.5)) continue;
        sample.part_mask[at] = static_cast<std::uint8_t>(shape.part_id);
        sample.fg_mask[at] = 1;
        const double channels[3] = {color.r, color.g, color.b};
        for (int c = 0; c < 3; ++c) {
          const double v = channels[c] + rng.uniform(-0.02, 0.02);
          sample.pixels[static_cast<std::size_t>(c) * s * s + at] =
              static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
        }
      }
  }

  // keypoint per part id: mask centroid, snapped onto the mask if needed
  for (int part = 1; part <= spec.parts_per_object; ++part) {
    double my = 0, mx = 0;
    long count = 0;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        if (sample.part_mask[y * s + x] == part) {
          my += y;
          mx += x;
          ++count;
        }
    if (count == 0) continue;
    int ky = static_cast<int>(my / count + 0.5), kx = static_cast<int>(mx / count + 0.5);
    if (sample.part_mask[ky * s + kx] != part) {
      long best = -1;
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
          if (sample.part_mask[y * s + x] == part) {
            const long d2 = static_cast<long>(y - ky) * (y - ky) +
                            static_cast<long>(x - kx) * (x - kx);
            if (best < 0 || d2 < best) {
              best = d2;
              my = y;
              mx = x;
            }
          }
      ky = static_cast<int>(my);
      kx = static_cast<int>(mx);
    }
    Keypoint kp;
    kp.part_id = part;
    kp.x = (kx + 0.5) / s;
    kp.y = (ky + 0.5) / s;
    kp.visible = true;
    sample.keypoints.push_back(kp);
  }
  return sample;
}

// ---- on-disk layout ----

namespace synth_detail {

inline ImageU8 pixels_to_image(const AnnotatedSample& s) {
  ImageU8 img;
  img.width = img.height = s.side;
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(3) * s.side * s.side);
  for (int y = 0; y < s.side; ++y)
    for (int x = 0; x < s.side; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = s.pixels[static_cast<std::size_t>(c) * s.side * s.side + y * s.side + x];
  return img;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace synth_detail

inline void generate(const SynthSpec& spec, const std::string& out_dir) {
  using namespace synth_detail;
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir + "/images", ec);
  fs::create_directories(out_dir + "/masks", ec);
  if (ec) throw IoError("cannot create dataset directories under " + out_dir);

  std::ostringstream keypoints, labels, splits;
  keypoints << "id,part_id,x,y,visible\n";
  labels << "id,class_id\n";
  splits << "id,split\n";

  for (int index = 0; index < spec.total_images(); ++index) {
    const AnnotatedSample s = synthesize_sample(spec, index);
    write_png(out_dir + "/images/" + s.id + ".png", pixels_to_image(s));
    ImageU8 mask;
    mask.width = mask.height = s.side;
    mask.channels = 1;
    mask.pixels = s.part_mask;
    write_png(out_dir + "/masks/" + s.id + ".png", mask);
    for (const Keypoint& kp : s.keypoints) {
      char row[96];
      std::snprintf(row, sizeof(row), "%s,%d,%.6f,%.6f,%d\n", s.id.c_str(), kp.part_id, kp.x,
                    kp.y, kp.visible ? 1 : 0);
      keypoints << row;
    }
    labels << s.id << "," << s.class_id << "\n";
    splits << s.id << "," << to_string(s.split) << "\n";
  }

  auto dump = [&](const std::string& name, const std::ostringstream& body) {
    std::ofstream out(out_dir + "/" + name, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + out_dir + "/" + name);
    const std::string text = body.str();
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
  };
  dump("keypoints.csv", keypoints);
  dump("labels.csv", labels);
  dump("split.csv", splits);
}

// Loads and validates the generic layout. Invariant violations name the
// offending sample.
inline Dataset load(const std::string& dir) {
  using namespace synth_detail;
  namespace fs = std::filesystem;
  if (!fs::exists(dir + "/labels.csv"))
    throw IoError("dataset at " + dir + " is missing labels.csv");

  auto read_csv = [&](const std::string& name,
                      const std::string& header) -> std::vector<std::vector<std::string>> {
    std::ifstream in(dir + "/" + name);
    if (!in) throw IoError("cannot open " + dir + "/" + name);
    std::string line;
    if (!std::getline(in, line)) throw FormatError(dir + "/" + name + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != header)
      throw FormatError(dir + "/" + name + ": expected header '" + header + "', got '" + line +
                        "'");
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      rows.push_back(split_csv(line));
    }
    return rows;
  };

  Dataset ds;
  ds.root = dir;

  std::map<std::string, Split> split_map;
  for (const auto& row : read_csv("split.csv", "id,split")) {
    if (row.size() != 2) throw FormatError(dir + "/split.csv: malformed row");
    split_map[row[0]] = split_from_string(row[1]);
  }

  std::map<std::string, std::vector<Keypoint>> kp_map;
  if (fs::exists(dir + "/keypoints.csv")) {
    ds.has_keypoints = true;
    for (const auto& row : read_csv("keypoints.csv", "id,part_id,x,y,visible")) {
      if (row.size() != 5) throw FormatError(dir + "/keypoints.csv: malformed row");
      Keypoint kp;
      kp.part_id = std::stoi(row[1]);
      kp.x = std::stod(row[2]);
      kp.y = std::stod(row[3]);
      kp.visible = row[4] != "0";
      if (kp.x < 0.0 || kp.x > 1.0 || kp.y < 0.0 || kp.y > 1.0)
        throw InputError("sample " + row[0] + ": keypoint (" + row[2] + "," + row[3] +
                         ") outside image bounds");
      if (kp.part_id < 1) throw InputError("sample " + row[0] + ": keypoint part id must be >= 1");
      kp_map[row[0]].push_back(kp);
    }
  }

  for (const auto& row : read_csv("labels.csv", "id,class_id")) {
    if (row.size() != 2) throw FormatError(dir + "/labels.csv: malformed row");
    AnnotatedSample s;
    s.id = row[0];
    s.class_id = std::stoi(row[1]);
    if (s.class_id < 0) throw InputError("sample " + s.id + ": negative class id");

    const std::string img_path = dir + "/images/" + s.id + ".png";
    const std::string mask_path = dir + "/masks/" + s.id + ".png";
    if (!fs::exists(img_path)) throw IoError("sample " + s.id + ": missing " + img_path);
    if (!fs::exists(mask_path)) throw IoError("sample " + s.id + ": missing " + mask_path);
    const ImageU8 img = read_png(img_path);
    const ImageU8 mask = read_png(mask_path);
    if (img.channels != 3) throw FormatError("sample " + s.id + ": image must be 8-bit RGB");
    if (mask.channels != 1)
      throw FormatError("sample " + s.id + ": mask must be 8-bit single channel");
    if (img.width != img.height || mask.width != img.width || mask.height != img.height)
      throw FormatError("sample " + s.id + ": image and mask must be square and equal-sized");
    if (ds.image_side == 0) ds.image_side = img.width;
    if (img.width != ds.image_side)
      throw FormatError("sample " + s.id + ": image side differs from the rest of the dataset");

    s.side = img.width;
    s.pixels.resize(static_cast<std::size_t>(3) * s.side * s.side);
    for (int y = 0; y < s.side; ++y)
      for (int x = 0; x < s.side; ++x)
        for (int c = 0; c < 3; ++c)
          s.pixels[static_cast<std::size_t>(c) * s.side * s.side + y * s.side + x] =
              img.at(y, x, c);
    s.part_mask = mask.pixels;
    s.fg_mask.resize(s.part_mask.size());
    for (std::size_t i = 0; i < s.part_mask.size(); ++i) s.fg_mask[i] = s.part_mask[i] > 0;

    auto split_it = split_map.find(s.id);
    if (split_it == split_map.end())
      throw FormatError("sample " + s.id + ": missing from split.csv");
    s.split = split_it->second;

    if (auto it = kp_map.find(s.id); it != kp_map.end()) {
      for (const Keypoint& kp : it->second) {
        const int px = std::min(s.side - 1, static_cast<int>(kp.x * s.side));
        const int py = std::min(s.side - 1, static_cast<int>(kp.y * s.side));
        if (kp.visible && s.part_mask[py * s.side + px] != kp.part_id)
          throw InputError("sample " + s.id + ": keypoint for part " +
                           std::to_string(kp.part_id) + " does not lie on its mask");
      }
      s.keypoints = it->second;
    }

    ds.num_classes = std::max(ds.num_classes, s.class_id + 1);
    for (std::uint8_t m : s.part_mask) ds.num_parts = std::max(ds.num_parts, static_cast<int>(m));
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw FormatError("dataset at " + dir + " holds no samples");
  return ds;
}

}  // namespace pdisco
