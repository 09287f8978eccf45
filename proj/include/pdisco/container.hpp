#pragma once

// Binary tensor container used for checkpoints and precomputed features.
// Layout: magic "PDSC", format version u32, entry count u32, then per entry
// name length u16 + UTF-8 name, dtype tag u8 (0=f32, 1=f64, 2=i64), rank u8,
// dims as u64s, raw little-endian data. The file ends with a CRC32 of every
// preceding byte.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pdisco/errors.hpp"
#include "pdisco/tensor.hpp"

namespace pdisco {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'P', 'D', 'S', 'C'};

inline std::uint32_t crc32_update(std::uint32_t crc, const std::uint8_t* data, std::size_t len) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc;
}

inline std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  return crc32_update(0xFFFFFFFFu, bytes.data(), bytes.size()) ^ 0xFFFFFFFFu;
}

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i64 = 2 };

struct ContainerEntry {
  DType dtype = DType::f64;
  std::vector<std::uint64_t> dims;
  std::vector<double> reals;        // f32/f64 payloads
  std::vector<std::int64_t> ints;   // i64 payloads

  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (std::uint64_t d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, const std::string& path)
      : data_(data), size_(size), path_(path) {}

  std::size_t offset() const { return at_; }

  const std::uint8_t* take(std::size_t n) {
    if (at_ + n > size_)
      throw FormatError(path_ + ": truncated container at byte offset " + std::to_string(at_));
    const std::uint8_t* p = data_ + at_;
    at_ += n;
    return p;
  }

  std::uint16_t u16() {
    const std::uint8_t* p = take(2);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    const std::uint8_t* p = take(4);
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::uint64_t u64() {
    const std::uint8_t* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t at_ = 0;
  std::string path_;
};

inline std::uint64_t bits_of(double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  return u;
}
inline double double_of(std::uint64_t u) {
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}
inline std::uint32_t bits_of_f32(float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  return u;
}
inline float f32_of(std::uint32_t u) {
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace detail

class ContainerWriter {
 public:
  void add_f64(const std::string& name, std::vector<std::uint64_t> dims,
               std::vector<double> values) {
    ContainerEntry e;
    e.dtype = DType::f64;
    e.dims = std::move(dims);
    e.reals = std::move(values);
    insert(name, std::move(e));
  }

  void add_f32(const std::string& name, std::vector<std::uint64_t> dims,
               std::vector<double> values) {
    ContainerEntry e;
    e.dtype = DType::f32;
    e.dims = std::move(dims);
    e.reals = std::move(values);
    insert(name, std::move(e));
  }

  void add_i64(const std::string& name, std::vector<std::uint64_t> dims,
               std::vector<std::int64_t> values) {
    ContainerEntry e;
    e.dtype = DType::i64;
    e.dims = std::move(dims);
    e.ints = std::move(values);
    insert(name, std::move(e));
  }

  void add_tensor(const std::string& name, const Tensor& t) {
    std::vector<std::uint64_t> dims;
    for (int d : t.dims()) dims.push_back(static_cast<std::uint64_t>(d));
    add_f64(name, std::move(dims), t.storage());
  }

  void add_scalar_f64(const std::string& name, double v) { add_f64(name, {}, {v}); }
  void add_scalar_i64(const std::string& name, std::int64_t v) { add_i64(name, {}, {v}); }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
    detail::put_u32(out, kContainerVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
      detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
      out.insert(out.end(), name.begin(), name.end());
      out.push_back(static_cast<std::uint8_t>(e.dtype));
      out.push_back(static_cast<std::uint8_t>(e.dims.size()));
      for (std::uint64_t d : e.dims) detail::put_u64(out, d);
      switch (e.dtype) {
        case DType::f32:
          for (double v : e.reals) detail::put_u32(out, detail::bits_of_f32(static_cast<float>(v)));
          break;
        case DType::f64:
          for (double v : e.reals) detail::put_u64(out, detail::bits_of(v));
          break;
        case DType::i64:
          for (std::int64_t v : e.ints) detail::put_u64(out, static_cast<std::uint64_t>(v));
          break;
      }
    }
    detail::put_u32(out, crc32_of(out));
    return out;
  }

  // write-then-rename so interrupted writes never leave a corrupt file behind
  void write(const std::string& path) const {
    const std::vector<std::uint8_t> bytes = serialize();
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot open " + tmp + " for writing");
      out.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
      if (!out) throw IoError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::map<std::string, ContainerEntry> entries_;

  void insert(const std::string& name, ContainerEntry e) {
    if (name.size() > 0xFFFF) throw ConfigError("entry name too long");
    std::uint64_t expect = e.count();
    const std::size_t have = e.dtype == DType::i64 ? e.ints.size() : e.reals.size();
    if (expect != have) throw ConfigError("entry " + name + " value count does not match dims");
    entries_[name] = std::move(e);
  }
};

class ContainerReader {
 public:
  explicit ContainerReader(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    parse(bytes);
  }

  static ContainerReader from_bytes(std::vector<std::uint8_t> bytes, const std::string& label) {
    return ContainerReader(std::move(bytes), label);
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  const ContainerEntry& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError(path_ + ": missing entry '" + name + "'");
    return it->second;
  }

  Tensor tensor(const std::string& name) const {
    const ContainerEntry& e = get(name);
    if (e.dtype == DType::i64) throw FormatError(path_ + ": entry '" + name + "' is integer");
    std::vector<int> dims;
    for (std::uint64_t d : e.dims) dims.push_back(static_cast<int>(d));
    return Tensor::from_values(std::move(dims), e.reals);
  }

  double scalar_f64(const std::string& name) const {
    const ContainerEntry& e = get(name);
    if (e.dtype == DType::i64 || e.reals.size() != 1)
      throw FormatError(path_ + ": entry '" + name + "' is not a real scalar");
    return e.reals[0];
  }

  std::int64_t scalar_i64(const std::string& name) const {
    const ContainerEntry& e = get(name);
    if (e.dtype != DType::i64 || e.ints.size() != 1)
      throw FormatError(path_ + ": entry '" + name + "' is not an integer scalar");
    return e.ints[0];
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& kv : entries_) out.push_back(kv.first);
    return out;
  }

 private:
  std::string path_;
  std::map<std::string, ContainerEntry> entries_;

  ContainerReader(std::vector<std::uint8_t> bytes, const std::string& label) : path_(label) {
    parse(bytes);
  }

  void parse(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16) throw FormatError(path_ + ": container too small");
    if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
      throw FormatError(path_ + ": bad magic, not a PDSC container");
    const std::uint32_t stored_crc =
        static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
        (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
        (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
        (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
    const std::uint32_t computed =
        crc32_update(0xFFFFFFFFu, bytes.data(), bytes.size() - 4) ^ 0xFFFFFFFFu;
    if (stored_crc != computed)
      throw FormatError(path_ + ": checksum mismatch, file is corrupt");

    detail::ByteReader r(bytes.data(), bytes.size() - 4, path_);
    r.take(4);  // magic
    const std::uint32_t version = r.u32();
    if (version != kContainerVersion)
      throw FormatError(path_ + ": unsupported container version " + std::to_string(version) +
                        " (expected " + std::to_string(kContainerVersion) + ")");
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint16_t name_len = r.u16();
      const std::uint8_t* name_bytes = r.take(name_len);
      std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
      ContainerEntry e;
      const std::uint8_t dtype = *r.take(1);
      if (dtype > 2)
        throw FormatError(path_ + ": unknown dtype tag " + std::to_string(dtype) +
                          " at byte offset " + std::to_string(r.offset() - 1));
      e.dtype = static_cast<DType>(dtype);
      const std::uint8_t rank = *r.take(1);
      std::uint64_t n = 1;
      for (std::uint8_t d = 0; d < rank; ++d) {
        e.dims.push_back(r.u64());
        n *= e.dims.back();
      }
      if (n > (1ull << 32))
        throw FormatError(path_ + ": entry '" + name + "' implausibly large");
      switch (e.dtype) {
        case DType::f32:
          e.reals.reserve(n);
          for (std::uint64_t j = 0; j < n; ++j)
            e.reals.push_back(static_cast<double>(detail::f32_of(r.u32())));
          break;
        case DType::f64:
          e.reals.reserve(n);
          for (std::uint64_t j = 0; j < n; ++j) e.reals.push_back(detail::double_of(r.u64()));
          break;
        case DType::i64:
          e.ints.reserve(n);
          for (std::uint64_t j = 0; j < n; ++j)
            e.ints.push_back(static_cast<std::int64_t>(r.u64()));
          break;
      }
      entries_[name] = std::move(e);
    }
  }
};

}  // namespace pdisco
