// SPDX-License-Identifier: Apache-2.0
//
// RCFT tensor files: "RCFT", dtype byte (0 = f32, 1 = f64), rank byte,
// rank x u64 little-endian dims, then little-endian values.
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include "rcfusion/tensor.hpp"

namespace rcf {

inline constexpr std::array<char, 4> kRcftMagic{'R', 'C', 'F', 'T'};

template <Scalar T>
constexpr std::uint8_t rcft_dtype_code() {
  return std::same_as<T, float> ? 0 : 1;
}

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes, 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char bytes[8];
  if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw IoError("RCFT: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

template <Scalar T>
void put_values(std::ostream& os, std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<char> buf(values.size() * sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<Bits>(values[i]);
    for (std::size_t b = 0; b < sizeof(T); ++b)
      buf[i * sizeof(T) + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

template <Scalar T>
std::vector<T> get_values(std::istream& is, std::size_t count) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<unsigned char> buf(count * sizeof(T));
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw IoError("RCFT: truncated payload");
  }
  std::vector<T> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b)
      bits |= static_cast<Bits>(buf[i * sizeof(T) + b]) << (8 * b);
    out[i] = std::bit_cast<T>(bits);
  }
  return out;
}

}  // namespace detail

template <Scalar T>
void write_rcft(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw ShapeError("RCFT supports rank up to 255");
  os.write(kRcftMagic.data(), 4);
  os.put(static_cast<char>(rcft_dtype_code<T>()));
  os.put(static_cast<char>(t.rank()));
  for (auto d : t.shape()) detail::put_u64(os, d);
  detail::put_values<T>(os, t.data());
  if (!os) throw IoError("RCFT: write failed");
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

inline AnyTensor read_rcft_any(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kRcftMagic.data(), 4) != 0) {
    throw IoError("RCFT: bad magic");
  }
  const int dtype = is.get();
  const int rank = is.get();
  if (dtype != 0 && dtype != 1) throw IoError("RCFT: unknown dtype code " + std::to_string(dtype));
  if (rank < 0) throw IoError("RCFT: truncated header");
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) d = detail::get_u64(is);
  const auto n = numel(shape);
  if (dtype == 0) return Tensor<float>(shape, detail::get_values<float>(is, n));
  return Tensor<double>(shape, detail::get_values<double>(is, n));
}

/// Reads one record, requiring it to hold values of type T.
template <Scalar T>
Tensor<T> read_rcft(std::istream& is) {
  auto any = read_rcft_any(is);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return *t;
  throw IoError("RCFT: dtype does not match the requested precision");
}

template <Scalar T>
void save_rcft(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  write_rcft(os, t);
}

template <Scalar T>
Tensor<T> load_rcft(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  return read_rcft<T>(is);
}

}  // namespace rcf
