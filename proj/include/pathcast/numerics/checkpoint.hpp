// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "pathcast/numerics/tape.hpp"

// Flat parameter checkpoint:
//   "PCK1"
//   repeat until EOF:
//     u32 name length, name bytes, u32 rank, rank x u64 dims,
//     prod(dims) x f64 values
// All integers and floats little-endian.

namespace pathcast::num {

namespace detail {

template <class T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
bool get_le(std::istream& in, T& value) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  std::memcpy(&value, bytes, sizeof(T));
  return true;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<const Parameter*>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write checkpoint", {path});
  out.write("PCK1", 4);
  for (const Parameter* p : params) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->name().size()));
    out.write(p->name().data(), static_cast<std::streamsize>(p->name().size()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t d : p->value.shape) detail::put_le<std::uint64_t>(out, d);
    for (double v : p->value.data) detail::put_le<double>(out, v);
  }
}

inline std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open checkpoint", {path});
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "PCK1", 4) != 0)
    throw Error(ErrorCode::FormatError, "bad checkpoint header", {path});
  std::vector<std::pair<std::string, Tensor>> out;
  std::uint32_t name_len = 0;
  while (detail::get_le(in, name_len)) {
    std::string name(name_len, '\0');
    std::uint32_t rank = 0;
    if (!in.read(name.data(), name_len) || !detail::get_le(in, rank))
      throw Error(ErrorCode::FormatError, "truncated checkpoint entry", {path});
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t dim = 0;
      if (!detail::get_le(in, dim)) throw Error(ErrorCode::FormatError, "truncated checkpoint dims", {name});
      d = static_cast<std::size_t>(dim);
    }
    Tensor t(shape);
    for (double& v : t.data)
      if (!detail::get_le(in, v)) throw Error(ErrorCode::FormatError, "truncated checkpoint values", {name});
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace pathcast::num
