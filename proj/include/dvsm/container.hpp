#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dvsm/tensor.hpp"

namespace dvsm {

// Named-tensor checkpoint file:
//   "DVSM" | u32 version=1 | u32 metadata length | metadata (UTF-8 JSON)
//   then per tensor: u32 name length | name | u8 rank | u64 extents | f32 LE payload
// Tensors run to end of file. Round trips are bit-exact.

struct ContainerTensor {
  Shape shape;
  std::vector<float> data;
};

struct Container {
  std::string metadata;                          // JSON text, echoed verbatim
  std::map<std::string, ContainerTensor> tensors;  // sorted => deterministic files
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8), (unsigned char)(v >> 16),
                        (unsigned char)(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
      std::uint32_t(b[3]) << 24;
  return true;
}

inline bool get_u64(std::istream& is, std::uint64_t& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return true;
}

inline std::uint32_t f32_bits(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  return u;
}

inline float bits_f32(std::uint32_t u) {
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

inline void save_container(const std::string& path, const Container& c) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_container: cannot open " + path);
  os.write("DVSM", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, std::uint32_t(c.metadata.size()));
  os.write(c.metadata.data(), std::streamsize(c.metadata.size()));
  for (const auto& [name, t] : c.tensors) {
    if (shape_numel(t.shape) != t.data.size())
      throw std::runtime_error("save_container: shape/data mismatch for " + name);
    detail::put_u32(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    os.put(char(t.shape.size()));
    for (auto e : t.shape) detail::put_u64(os, e);
    for (float f : t.data) detail::put_u32(os, detail::f32_bits(f));
  }
  if (!os) throw std::runtime_error("save_container: write failed for " + path);
}

inline Container load_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_container: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DVSM", 4) != 0)
    throw std::runtime_error("load_container: bad magic in " + path);
  std::uint32_t version = 0, meta_len = 0;
  if (!detail::get_u32(is, version) || version != 1)
    throw std::runtime_error("load_container: unsupported version in " + path);
  if (!detail::get_u32(is, meta_len))
    throw std::runtime_error("load_container: truncated header in " + path);
  Container c;
  c.metadata.resize(meta_len);
  if (meta_len && !is.read(c.metadata.data(), meta_len))
    throw std::runtime_error("load_container: truncated metadata in " + path);
  for (;;) {
    std::uint32_t name_len = 0;
    if (!detail::get_u32(is, name_len)) break;  // clean end of file
    std::string name(name_len, '\0');
    if (name_len && !is.read(name.data(), name_len))
      throw std::runtime_error("load_container: truncated tensor name in " + path);
    const int rank = is.get();
    if (rank < 0) throw std::runtime_error("load_container: truncated rank in " + path);
    ContainerTensor t;
    t.shape.resize(std::size_t(rank));
    std::uint64_t n = 1;
    for (auto& e : t.shape) {
      std::uint64_t v = 0;
      if (!detail::get_u64(is, v)) throw std::runtime_error("load_container: truncated extents in " + path);
      e = std::size_t(v);
      n *= v;
    }
    t.data.resize(n);
    for (auto& f : t.data) {
      std::uint32_t u = 0;
      if (!detail::get_u32(is, u))
        throw std::runtime_error("load_container: truncated payload for " + name + " in " + path);
      f = detail::bits_f32(u);
    }
    c.tensors.emplace(std::move(name), std::move(t));
  }
  return c;
}

template <class T>
ContainerTensor to_container(const Tensor<T>& t) {
  ContainerTensor c;
  c.shape = t.shape();
  c.data.resize(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) c.data[i] = float(t.data()[i]);
  return c;
}

template <class T>
Tensor<T> from_container(const ContainerTensor& c) {
  Tensor<T> t(c.shape);
  for (std::size_t i = 0; i < c.data.size(); ++i) t.data()[i] = T(c.data[i]);
  return t;
}

}  // namespace dvsm
