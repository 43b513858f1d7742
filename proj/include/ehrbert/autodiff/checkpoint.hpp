// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrbert/autodiff/parameter_store.hpp"
#include "ehrbert/core/error.hpp"

// Checkpoint file layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "EHRBCKPT"
//   offset 8   u32       format version (1)
//   offset 12  u64       header length H in bytes
//   offset 20  H bytes   UTF-8 JSON header, compact, keys sorted:
//                          {"config": {...}, "dtype": "float32"|"float64",
//                           "optimizer_step": t, "params": [
//                             {"name", "shape", "offset", "numel", "trainable", "decay"} ...],
//                           "type": "<tag>"}
//   offset 20+H          payload; for each parameter in header order the
//                        value array, then the AdamW first and second
//                        moments, each numel little-endian IEEE-754 values
//                        of the header dtype. "offset" is the element index
//                        of the parameter's value array within the payload.
//
// Header JSON is written with sorted keys and no whitespace, so loading a
// checkpoint and saving it again reproduces the file byte for byte.

namespace ehrbert::ad {

inline constexpr char kCheckpointMagic[8] = {'E', 'H', 'R', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "float32" : "float64";
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

struct CheckpointHeader {
  std::string type;
  nlohmann::json config;
  std::string dtype;
  std::size_t optimizer_step = 0;
  nlohmann::json params;
};

template <typename T>
void save_checkpoint(std::ostream& os, const ParameterStore<T>& store, const std::string& type,
                     const nlohmann::json& config) {
  nlohmann::json header;
  header["type"] = type;
  header["config"] = config;
  header["dtype"] = dtype_name<T>();
  header["optimizer_step"] = store.step;
  auto params = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    params.push_back({{"name", p.name},
                      {"shape", p.value.shape()},
                      {"offset", offset},
                      {"numel", p.value.size()},
                      {"trainable", p.trainable},
                      {"decay", p.decay}});
    offset += 3 * p.value.size();
  }
  header["params"] = std::move(params);
  const std::string text = header.dump();
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    os.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(T)));
    os.write(reinterpret_cast<const char*>(p.m.data()), static_cast<std::streamsize>(p.m.size() * sizeof(T)));
    os.write(reinterpret_cast<const char*>(p.v.data()), static_cast<std::streamsize>(p.v.size() * sizeof(T)));
  }
}

template <typename T>
void save_checkpoint(const std::string& path, const ParameterStore<T>& store, const std::string& type,
                     const nlohmann::json& config) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path);
  save_checkpoint(os, store, type, config);
  if (!os) throw IoError("write failed for checkpoint " + path);
}

/// Reads the header and leaves the stream at the start of the payload.
inline CheckpointHeader read_checkpoint_header(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw IoError("checkpoint: bad magic");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const auto len = detail::get<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("checkpoint: truncated header");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad header: ") + e.what());
  }
  CheckpointHeader h;
  h.type = j.at("type").get<std::string>();
  h.config = j.at("config");
  h.dtype = j.at("dtype").get<std::string>();
  h.optimizer_step = j.at("optimizer_step").get<std::size_t>();
  h.params = j.at("params");
  return h;
}

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path);
  return read_checkpoint_header(is);
}

struct LoadedTensor {
  Shape shape;
  bool trainable = true;
  bool decay = true;
  std::vector<double> value, m, v;
};

/// Whole checkpoint as double-precision arrays keyed by name, in file order.
struct CheckpointData {
  CheckpointHeader header;
  std::vector<std::pair<std::string, LoadedTensor>> tensors;

  const LoadedTensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename U>
std::vector<double> read_array(std::istream& is, std::size_t n) {
  std::vector<U> buf(n);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(U)));
  if (!is) throw IoError("checkpoint: truncated payload");
  return std::vector<double>(buf.begin(), buf.end());
}

}  // namespace detail

inline CheckpointData read_checkpoint(std::istream& is) {
  CheckpointData d;
  d.header = read_checkpoint_header(is);
  const bool f32 = d.header.dtype == "float32";
  if (!f32 && d.header.dtype != "float64") throw IoError("checkpoint: unknown dtype " + d.header.dtype);
  for (const auto& jp : d.header.params) {
    LoadedTensor t;
    t.shape = jp.at("shape").get<Shape>();
    t.trainable = jp.at("trainable").get<bool>();
    t.decay = jp.at("decay").get<bool>();
    const auto n = jp.at("numel").get<std::size_t>();
    if (numel(t.shape) != n) throw IoError("checkpoint: numel does not match shape");
    for (auto* dst : {&t.value, &t.m, &t.v})
      *dst = f32 ? detail::read_array<float>(is, n) : detail::read_array<double>(is, n);
    d.tensors.emplace_back(jp.at("name").get<std::string>(), std::move(t));
  }
  return d;
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path);
  return read_checkpoint(is);
}

enum class LoadMode {
  exact,   // the file and the store hold the same parameter names
  subset,  // every store parameter starting with the prefix must be in the file
};

/// Copies values (and optimizer state when `with_optimizer`) into the store.
/// Shape mismatches or missing names raise ConfigError.
template <typename T>
void load_into(const CheckpointData& data, ParameterStore<T>& store, LoadMode mode = LoadMode::exact,
               const std::string& prefix = "", bool with_optimizer = true) {
  if (mode == LoadMode::exact && data.tensors.size() != store.size())
    throw ConfigError("checkpoint holds " + std::to_string(data.tensors.size()) + " parameters, model expects " +
                      std::to_string(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store.at(i);
    if (mode == LoadMode::subset && p.name.rfind(prefix, 0) != 0) continue;
    const LoadedTensor* t = data.find(p.name);
    if (!t) throw ConfigError("checkpoint lacks parameter " + p.name);
    if (t->shape != p.value.shape())
      throw ConfigError("checkpoint shape " + shape_string(t->shape) + " for " + p.name + " but model expects " +
                        shape_string(p.value.shape()));
    for (std::size_t e = 0; e < t->value.size(); ++e) p.value[e] = static_cast<T>(t->value[e]);
    if (with_optimizer) {
      for (std::size_t e = 0; e < t->value.size(); ++e) {
        p.m[e] = static_cast<T>(t->m[e]);
        p.v[e] = static_cast<T>(t->v[e]);
      }
      p.trainable = t->trainable;
      p.decay = t->decay;
    }
  }
  if (with_optimizer) store.step = data.header.optimizer_step;
}

}  // namespace ehrbert::ad
