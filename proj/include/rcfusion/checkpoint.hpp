// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout:
//   "RCFC", u32 version, u64 entry count,
//   per entry: u32 name length, name bytes, u8 rank, rank x u64 dims
//   then one RCFT record per entry in manifest order.
// All integers little-endian.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "rcfusion/layers.hpp"
#include "rcfusion/rcft.hpp"

namespace rcf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char bytes[4];
  if (!is.read(reinterpret_cast<char*>(bytes), 4)) throw IoError("checkpoint: truncated manifest");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace detail

template <Scalar T>
void write_checkpoint(std::ostream& os, const ParamList<T>& entries) {
  os.write("RCFC", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u64(os, entries.size());
  for (const auto& e : entries) {
    detail::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    os.put(static_cast<char>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) detail::put_u64(os, d);
  }
  for (const auto& e : entries) write_rcft(os, e.tensor);
  if (!os) throw IoError("checkpoint: write failed");
}

template <Scalar T>
ParamList<T> read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "RCFC") throw IoError("checkpoint: bad magic");
  if (detail::get_u32(is) != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
  const auto count = detail::get_u64(is);
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(detail::get_u32(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size())))
      throw IoError("checkpoint: truncated manifest");
    const int rank = is.get();
    if (rank < 0) throw IoError("checkpoint: truncated manifest");
    Shape shape(static_cast<std::size_t>(rank));
    for (auto& d : shape) d = detail::get_u64(is);
    manifest.emplace_back(std::move(name), std::move(shape));
  }
  ParamList<T> out;
  for (auto& [name, shape] : manifest) {
    auto t = read_rcft<T>(is);
    if (t.shape() != shape) {
      throw IoError("checkpoint: record '" + name + "' has shape " + shape_str(t.shape()) +
                    " but manifest says " + shape_str(shape));
    }
    out.push_back({std::move(name), std::move(t)});
  }
  return out;
}

template <Scalar T>
void save_checkpoint(const std::filesystem::path& path, const ParamList<T>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  write_checkpoint(os, entries);
}

template <Scalar T>
ParamList<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  return read_checkpoint<T>(is);
}

/// Copies loaded values into live tensors; names, order and shapes must match.
template <Scalar T>
void assign_checkpoint(ParamList<T>& targets, const ParamList<T>& loaded) {
  if (targets.size() != loaded.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(loaded.size()) +
                      " tensors but the model expects " + std::to_string(targets.size()));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& src = loaded[i];
    auto& dst = targets[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
      throw ConfigError("checkpoint entry " + std::to_string(i) + " is '" + src.name + "' " +
                        shape_str(src.tensor.shape()) + " but the model expects '" + dst.name +
                        "' " + shape_str(dst.tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto dst = targets[i].tensor.mutable_data();
    const auto src = loaded[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace rcf
