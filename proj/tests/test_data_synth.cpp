#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "pdisco/data_synth.hpp"

using namespace pdisco;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool trees_identical(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> rel;
  for (const auto& entry : fs::recursive_directory_iterator(a))
    if (entry.is_regular_file()) rel.push_back(fs::relative(entry.path(), a));
  for (const fs::path& r : rel) {
    if (!fs::exists(b / r)) return false;
    if (slurp(a / r) != slurp(b / r)) return false;
  }
  return true;
}

SynthSpec tiny_spec() {
  SynthSpec spec;
  spec.classes = 2;
  spec.parts_per_object = 3;
  spec.images_per_class = 10;
  spec.image_side = 32;
  spec.seed = 7;
  return spec;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("generation is deterministic, byte for byte") {
  TempDir a("pdisco_synth_a"), b("pdisco_synth_b");
  generate(tiny_spec(), a.path.string());
  generate(tiny_spec(), b.path.string());
  CHECK(trees_identical(a.path, b.path));
  CHECK(trees_identical(b.path, a.path));
}

TEST_CASE("sample counts and label balance") {
  TempDir dir("pdisco_synth_counts");
  generate(tiny_spec(), dir.path.string());
  Dataset ds = load(dir.path.string());
  CHECK(ds.samples.size() == 20);
  CHECK(ds.num_classes == 2);
  std::map<int, int> per_class;
  for (const AnnotatedSample& s : ds.samples) per_class[s.class_id]++;
  CHECK(per_class[0] == 10);
  CHECK(per_class[1] == 10);
  CHECK(ds.split_indices(Split::train).size() + ds.split_indices(Split::val).size() +
            ds.split_indices(Split::test).size() ==
        20);
}

TEST_CASE("keypoints land on their part masks") {
  SynthSpec spec = tiny_spec();
  for (bool irregular : {false, true}) {
    spec.irregular_parts = irregular;
    spec.multi_instance = irregular;  // exercise both flags together once
    for (int index = 0; index < spec.total_images(); ++index) {
      AnnotatedSample s = synthesize_sample(spec, index);
      for (const Keypoint& kp : s.keypoints) {
        const int px = std::min(s.side - 1, static_cast<int>(kp.x * s.side));
        const int py = std::min(s.side - 1, static_cast<int>(kp.y * s.side));
        REQUIRE(s.part_mask[py * s.side + px] == kp.part_id);
      }
    }
  }
}

TEST_CASE("round trip preserves every field bit-exactly") {
  TempDir dir("pdisco_synth_rt");
  SynthSpec spec = tiny_spec();
  generate(spec, dir.path.string());
  Dataset ds = load(dir.path.string());
  REQUIRE(ds.samples.size() == static_cast<std::size_t>(spec.total_images()));
  for (int index = 0; index < spec.total_images(); ++index) {
    const AnnotatedSample fresh = synthesize_sample(spec, index);
    const AnnotatedSample& loaded = ds.samples[index];
    REQUIRE(loaded.id == fresh.id);
    CHECK(loaded.class_id == fresh.class_id);
    CHECK(loaded.split == fresh.split);
    CHECK(loaded.pixels == fresh.pixels);
    CHECK(loaded.part_mask == fresh.part_mask);
    CHECK(loaded.fg_mask == fresh.fg_mask);
    REQUIRE(loaded.keypoints.size() == fresh.keypoints.size());
    for (std::size_t k = 0; k < fresh.keypoints.size(); ++k) {
      CHECK(loaded.keypoints[k].part_id == fresh.keypoints[k].part_id);
      CHECK(loaded.keypoints[k].x == doctest::Approx(fresh.keypoints[k].x).epsilon(1e-6));
      CHECK(loaded.keypoints[k].y == doctest::Approx(fresh.keypoints[k].y).epsilon(1e-6));
    }
  }
}

TEST_CASE("missing and malformed files are reported with the sample id") {
  TempDir dir("pdisco_synth_err");
  generate(tiny_spec(), dir.path.string());

  fs::remove(dir.path / "masks" / "000003.png");
  CHECK_THROWS_WITH_AS(load(dir.path.string()), doctest::Contains("000003"), IoError);
}

TEST_CASE("keypoints outside bounds are rejected") {
  TempDir dir("pdisco_synth_oob");
  generate(tiny_spec(), dir.path.string());
  std::ofstream kp(dir.path / "keypoints.csv", std::ios::trunc);
  kp << "id,part_id,x,y,visible\n000000,1,1.250000,0.500000,1\n";
  kp.close();
  CHECK_THROWS_WITH_AS(load(dir.path.string()), doctest::Contains("outside image bounds"),
                       InputError);
}

TEST_CASE("inconsistent keypoints are rejected") {
  TempDir dir("pdisco_synth_inc");
  generate(tiny_spec(), dir.path.string());
  // claim part 1 sits at the image corner, which is background
  std::ofstream kp(dir.path / "keypoints.csv", std::ios::trunc);
  kp << "id,part_id,x,y,visible\n000000,1,0.010000,0.010000,1\n";
  kp.close();
  CHECK_THROWS_WITH_AS(load(dir.path.string()), doctest::Contains("does not lie on its mask"),
                       InputError);
}

TEST_CASE("per-class appearance is consistent and classes are separable") {
  SynthSpec spec;
  spec.classes = 8;
  spec.parts_per_object = 4;
  spec.images_per_class = 25;
  spec.image_side = 64;
  spec.seed = 42;

  // nearest-centroid pixel-color baseline: mean object color per class
  std::vector<AnnotatedSample> train, test;
  for (int index = 0; index < spec.total_images(); ++index) {
    AnnotatedSample s = synthesize_sample(spec, index);
    (s.split == Split::test ? test : train).push_back(std::move(s));
  }
  auto mean_color = [](const AnnotatedSample& s) {
    double sum[3] = {0, 0, 0};
    long n = 0;
    for (int i = 0; i < s.side * s.side; ++i)
      if (s.fg_mask[i]) {
        for (int c = 0; c < 3; ++c) sum[c] += s.pixels[c * s.side * s.side + i];
        ++n;
      }
    std::array<double, 3> out{};
    for (int c = 0; c < 3; ++c) out[c] = n ? sum[c] / n : 0.0;
    return out;
  };
  std::vector<std::array<double, 3>> class_mean(8, {0, 0, 0});
  std::vector<int> class_count(8, 0);
  for (const AnnotatedSample& s : train) {
    const auto m = mean_color(s);
    for (int c = 0; c < 3; ++c) class_mean[s.class_id][c] += m[c];
    class_count[s.class_id]++;
  }
  for (int k = 0; k < 8; ++k)
    for (int c = 0; c < 3; ++c) class_mean[k][c] /= std::max(1, class_count[k]);

  int correct = 0;
  for (const AnnotatedSample& s : test) {
    const auto m = mean_color(s);
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < 8; ++k) {
      double d = 0;
      for (int c = 0; c < 3; ++c) d += (m[c] - class_mean[k][c]) * (m[c] - class_mean[k][c]);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    correct += best == s.class_id;
  }
  REQUIRE(test.size() > 10);
  CHECK(static_cast<double>(correct) / test.size() >= 0.99);

  // same part in the same class looks alike across samples
  auto part_color = [](const AnnotatedSample& s, int part) {
    double sum[3] = {0, 0, 0};
    long n = 0;
    for (int i = 0; i < s.side * s.side; ++i)
      if (s.part_mask[i] == part) {
        for (int c = 0; c < 3; ++c) sum[c] += s.pixels[c * s.side * s.side + i] / 255.0;
        ++n;
      }
    std::array<double, 3> out{};
    for (int c = 0; c < 3; ++c) out[c] = n ? sum[c] / n : -1.0;
    return out;
  };
  const auto ref = part_color(train[0], 1);
  for (std::size_t i = 1; i < std::min<std::size_t>(train.size(), 20); ++i) {
    if (train[i].class_id != train[0].class_id) continue;
    const auto other = part_color(train[i], 1);
    if (other[0] < 0) continue;
    double d = 0;
    for (int c = 0; c < 3; ++c) d += std::fabs(ref[c] - other[c]);
    CHECK(d < 0.1);
  }
}
