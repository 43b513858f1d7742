// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include "ehrbert/core/format.hpp"

namespace ehrbert::cli {

/// Lower-case hex SHA-256 of a byte string (OpenSSL EVP).
inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: EVP_Digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

inline std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

/// Flat "key = value" text, one key per line in key order.
inline std::string config_text(const std::map<std::string, std::string>& values) {
  std::string out;
  for (const auto& [k, v] : values) out += k + " = " + v + "\n";
  return out;
}

/// Per-run record: resolved config, seed, and checksums of every input and
/// output artifact. Contains no timestamps so identical runs write identical
/// manifests.
struct Manifest {
  std::string subcommand;
  std::map<std::string, std::string> config;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["tool"] = "ehrbert";
    j["subcommand"] = subcommand;
    j["seed"] = config.count("seed") ? config.at("seed") : "";
    j["config"] = config;
    auto files = [](const std::vector<std::string>& paths) {
      nlohmann::ordered_json arr = nlohmann::ordered_json::array();
      for (const auto& p : paths) arr.push_back({{"path", p}, {"sha256", sha256_file(p)}});
      return arr;
    };
    j["inputs"] = files(inputs);
    j["outputs"] = files(outputs);
    return j;
  }

  void write(const std::string& path) const { write_file(path, to_json().dump(2) + "\n"); }
};

}  // namespace ehrbert::cli
