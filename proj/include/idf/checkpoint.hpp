#pragma once

// Flat binary parameter checkpoint:
//   "IDFW" | version u32 | tensor count u32
//   per tensor: name length u32 | UTF-8 name | rank u32 | dims u32[rank] | f32[prod(dims)]
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "idf/common.hpp"

namespace idf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw LoadError("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  os.write("IDFW", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    std::size_t n = 1;
    for (auto d : t.dims) n *= d;
    require(n == t.data.size(), "checkpoint: dims do not match data length");
    detail::put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_u32(os, d);
    for (float f : t.data) detail::put_u32(os, std::bit_cast<std::uint32_t>(f));
  }
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "IDFW")
    throw LoadError("checkpoint: bad magic bytes");
  const auto version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw LoadError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::get_u32(is);
  std::vector<NamedTensor> out(count);
  for (auto& t : out) {
    const auto len = detail::get_u32(is);
    t.name.resize(len);
    if (!is.read(t.name.data(), len)) throw LoadError("checkpoint: truncated name");
    const auto rank = detail::get_u32(is);
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(detail::get_u32(is));
      n *= t.dims.back();
    }
    t.data.resize(n);
    for (auto& f : t.data) f = std::bit_cast<float>(detail::get_u32(is));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw LoadError("cannot open " + path + " for writing");
  write_checkpoint(os, tensors);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path);
  return read_checkpoint(is);
}

template <class S>
NamedTensor to_named(std::string name, const Mat<S>& m) {
  NamedTensor t;
  t.name = std::move(name);
  t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return t;
}

template <class S>
Mat<S> from_named(const NamedTensor& t) {
  require(t.dims.size() == 2, "checkpoint tensor is not rank 2");
  Mat<S> m(t.dims[0], t.dims[1]);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(t.data[static_cast<std::size_t>(i)]);
  return m;
}

}  // namespace idf
