#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "fd_check.hpp"
#include "pdisco/container.hpp"

using namespace pdisco;
using pdisco::testing::random_tensor;

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("container round trip is byte-identical") {
  const std::string path = "/tmp/pdisco_container_test.pdsc";
  RandomSource rng(3);
  ContainerWriter w;
  w.add_tensor("param/alpha", random_tensor({3, 4}, rng));
  w.add_f32("feat/small", {2, 2}, {1.5, -2.25, 0.5, 8.0});
  w.add_i64("meta/epoch", {}, {12});
  w.add_scalar_f64("meta/best", 0.875);
  w.write(path);

  ContainerReader r(path);
  CHECK(r.has("param/alpha"));
  CHECK(r.scalar_i64("meta/epoch") == 12);
  CHECK(r.scalar_f64("meta/best") == 0.875);
  CHECK(r.tensor("feat/small").at2(1, 1) == 8.0);

  // save -> load -> save reproduces the exact bytes
  ContainerWriter w2;
  for (const std::string& name : r.names()) {
    const ContainerEntry& e = r.get(name);
    if (e.dtype == DType::i64)
      w2.add_i64(name, e.dims, e.ints);
    else if (e.dtype == DType::f64)
      w2.add_f64(name, e.dims, e.reals);
    else
      w2.add_f32(name, e.dims, e.reals);
  }
  const std::string path2 = "/tmp/pdisco_container_test2.pdsc";
  w2.write(path2);
  CHECK(read_file(path) == read_file(path2));
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("a flipped byte fails the checksum") {
  const std::string path = "/tmp/pdisco_container_flip.pdsc";
  ContainerWriter w;
  w.add_f64("param/x", {4}, {1.0, 2.0, 3.0, 4.0});
  w.write(path);
  std::vector<std::uint8_t> bytes = read_file(path);
  bytes[bytes.size() / 2] ^= 0x40;
  write_file(path, bytes);
  CHECK_THROWS_WITH_AS(ContainerReader{path}, doctest::Contains("checksum"), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("unknown format versions are rejected by name") {
  std::vector<std::uint8_t> bytes;
  bytes.insert(bytes.end(), kContainerMagic, kContainerMagic + 4);
  for (int i = 0; i < 4; ++i) bytes.push_back(i == 0 ? 9 : 0);  // version 9
  for (int i = 0; i < 4; ++i) bytes.push_back(0);               // zero entries
  const std::uint32_t crc = crc32_of(bytes);
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>((crc >> (8 * i)) & 0xFF));
  const std::string path = "/tmp/pdisco_container_ver.pdsc";
  write_file(path, bytes);
  CHECK_THROWS_WITH_AS(ContainerReader{path}, doctest::Contains("version 9"), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("truncation reports a byte offset") {
  const std::string path = "/tmp/pdisco_container_trunc.pdsc";
  ContainerWriter w;
  w.add_f64("param/long_enough_name", {64}, std::vector<double>(64, 1.0));
  w.write(path);
  std::vector<std::uint8_t> bytes = read_file(path);
  // keep the checksum consistent with a truncated body
  bytes.resize(40);
  const std::uint32_t crc = crc32_of(bytes);
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>((crc >> (8 * i)) & 0xFF));
  write_file(path, bytes);
  CHECK_THROWS_WITH_AS(ContainerReader{path}, doctest::Contains("byte offset"), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("bad magic is rejected") {
  const std::string path = "/tmp/pdisco_container_magic.pdsc";
  write_file(path, std::vector<std::uint8_t>(32, 0x00));
  CHECK_THROWS_WITH_AS(ContainerReader{path}, doctest::Contains("magic"), FormatError);
  std::remove(path.c_str());
}
