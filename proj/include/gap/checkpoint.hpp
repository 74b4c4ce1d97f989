// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//
//   bytes 0..7    magic "GAPCKPT1"
//   bytes 8..15   header length N, uint64 little-endian
//   next N bytes  JSON header {format, version, dtype, config, params[], data_bytes}
//   remainder     raw little-endian parameter buffers at params[i].offset
//
// Offsets are relative to the start of the data section.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "gap/errors.hpp"
#include "gap/param_store.hpp"

namespace gap {

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'G', 'A', 'P', 'C', 'K', 'P', 'T', '1'};

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

template <typename U>
U byteswap_if_big(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return v;
}

template <typename U>
void write_le(std::ostream& os, U v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw InputError("checkpoint: truncated file");
  return byteswap_if_big(v);
}

}  // namespace detail

template <typename T>
struct Checkpoint {
  nlohmann::json config;
  ParamStore<T> params;
};

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params,
                     const nlohmann::json& config) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  nlohmann::json header;
  header["format"] = "gap-checkpoint";
  header["version"] = 1;
  header["dtype"] = detail::dtype_name<T>();
  header["config"] = config;
  std::uint64_t offset = 0;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : params.entries()) {
    const std::uint64_t nbytes = e.tensor.numel() * sizeof(T);
    list.push_back({{"name", e.name},
                    {"shape", e.tensor.shape()},
                    {"offset", offset},
                    {"nbytes", nbytes},
                    {"trainable", e.trainable}});
    offset += nbytes;
  }
  header["params"] = std::move(list);
  header["data_bytes"] = offset;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("checkpoint: cannot open " + path + " for writing");
  os.write(detail::kCheckpointMagic, 8);
  detail::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : params.entries()) {
    for (T v : e.tensor.values()) detail::write_le<T>(os, v);
  }
  if (!os) throw InputError("checkpoint: write failed for " + path);
}

/// Loads a checkpoint, converting stored values to T when the stored dtype
/// differs.
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw InputError("checkpoint: bad magic in " + path);
  }
  const auto header_len = detail::read_le<std::uint64_t>(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw InputError("checkpoint: truncated header in " + path);
  const auto header = nlohmann::json::parse(text);
  const std::string dtype = header.at("dtype").get<std::string>();
  if (dtype != "f32" && dtype != "f64") throw InputError("checkpoint: unknown dtype " + dtype);
  const std::streamoff data_start = is.tellg();

  Checkpoint<T> out;
  out.config = header.at("config");
  for (const auto& p : header.at("params")) {
    Shape shape = p.at("shape").get<Shape>();
    const std::size_t n = numel(shape);
    const auto offset = p.at("offset").get<std::uint64_t>();
    is.seekg(data_start + static_cast<std::streamoff>(offset));
    std::vector<T> values(n);
    for (auto& v : values) {
      v = dtype == "f32" ? static_cast<T>(detail::read_le<float>(is))
                         : static_cast<T>(detail::read_le<double>(is));
    }
    out.params.add(p.at("name").get<std::string>(), Tensor<T>(std::move(shape), std::move(values)),
                   p.value("trainable", true));
  }
  return out;
}

}  // namespace gap
