// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ehrbert/core/error.hpp"
#include "ehrbert/ehr/record.hpp"

namespace ehrbert::ehr {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kMaskId = 1;
inline constexpr std::int32_t kUnkId = 2;
inline constexpr std::int32_t kNumReserved = 3;

inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kMaskToken = "[MASK]";
inline constexpr std::string_view kUnkToken = "[UNK]";

/// Dense bidirectional code <-> id mapping. Ids 0..2 are PAD, MASK, UNK.
class Vocabulary {
 public:
  Vocabulary() {
    add(std::string(kPadToken));
    add(std::string(kMaskToken));
    add(std::string(kUnkToken));
  }

  /// Returns the id of `token`, inserting it at the end if absent.
  std::int32_t add(const std::string& token) {
    auto [it, inserted] = token_to_id_.try_emplace(token, static_cast<std::int32_t>(id_to_token_.size()));
    if (inserted) id_to_token_.push_back(token);
    return it->second;
  }

  std::int32_t id(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  bool contains(std::string_view token) const { return token_to_id_.count(std::string(token)) != 0; }

  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw VocabRangeError("vocabulary id " + std::to_string(id) + " out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return id_to_token_.size(); }

  /// One "token<TAB>id" line per entry in id order.
  void write(std::ostream& os) const {
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) os << id_to_token_[i] << '\t' << i << '\n';
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write vocabulary file " + path);
    write(os);
  }

  static Vocabulary read(std::istream& is) {
    Vocabulary v;
    v.token_to_id_.clear();
    v.id_to_token_.clear();
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw IoError("vocabulary line " + std::to_string(line_no) + ": missing tab");
      const std::string token = line.substr(0, tab);
      long id = -1;
      try {
        id = std::stol(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw IoError("vocabulary line " + std::to_string(line_no) + ": bad id");
      }
      if (id != static_cast<long>(v.id_to_token_.size()))
        throw IoError("vocabulary line " + std::to_string(line_no) + ": ids must be dense and ordered");
      v.add(token);
    }
    if (v.size() < static_cast<std::size_t>(kNumReserved) || v.token(kPadId) != kPadToken ||
        v.token(kMaskId) != kMaskToken || v.token(kUnkId) != kUnkToken)
      throw IoError("vocabulary file must start with the reserved tokens");
    return v;
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read vocabulary file " + path);
    return read(is);
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.id_to_token_ == b.id_to_token_; }

 private:
  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::vector<std::string> id_to_token_;
};

/// Reserved ids first, then codes in first-occurrence order over
/// patients, visits and codes as stored.
inline Vocabulary build_vocabulary(const std::vector<PatientRecord>& cohort) {
  if (cohort.empty()) throw EmptyCohort("build_vocabulary: cohort is empty");
  Vocabulary vocab;
  for (const auto& p : cohort)
    for (const auto& v : p.visits)
      for (const auto& c : v.codes) vocab.add(c.code);
  return vocab;
}

}  // namespace ehrbert::ehr
