// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ehrbert/core/error.hpp"
#include "ehrbert/ehr/record.hpp"
#include "ehrbert/ehr/vocabulary.hpp"

namespace ehrbert::ehr {

/// Tensorizable form of one patient. The three id streams have equal size;
/// entries at index >= length (if any) are padding and hold 0 in all streams.
struct ModelInput {
  std::vector<std::int32_t> code_ids;
  std::vector<std::int32_t> serialization_ids;
  std::vector<std::int32_t> visit_ids;
  std::size_t length = 0;
  bool prolonged_los_label = false;
  std::optional<bool> outcome_label;

  std::size_t padded_size() const { return code_ids.size(); }
  std::size_t num_visits() const { return length == 0 ? 0 : static_cast<std::size_t>(visit_ids[length - 1]); }

  /// Copy with a PAD tail so that padded_size() == size.
  ModelInput padded_to(std::size_t size) const {
    if (size < length) throw ContractError("padded_to: size below true length");
    ModelInput out = *this;
    out.code_ids.resize(size, kPadId);
    out.serialization_ids.resize(size, 0);
    out.visit_ids.resize(size, 0);
    return out;
  }

  friend bool operator==(const ModelInput&, const ModelInput&) = default;
};

struct EncodeOptions {
  std::size_t max_seq_len = 512;
  /// When set, every serialization id is 0 (code order inside a visit is
  /// then invisible to the model).
  bool constant_serialization = false;
};

/// Flattens visits in temporal order. Sequences longer than max_seq_len keep
/// the most recent whole visits; if even the newest visit is too long, its
/// first max_seq_len codes are kept. Visit ids are re-based to start at 1.
inline ModelInput encode_patient(const PatientRecord& patient, const Vocabulary& vocab,
                                 const EncodeOptions& options = {}) {
  if (options.max_seq_len < 1) throw ContractError("encode_patient: max_seq_len must be >= 1");
  if (patient.total_codes() == 0) throw EmptyPatient("encode_patient: patient " + patient.patient_id + " has no codes");

  // Find the oldest visit to keep.
  std::size_t first = patient.visits.size();
  std::size_t kept = 0;
  while (first > 0) {
    const std::size_t n = patient.visits[first - 1].codes.size();
    if (kept + n > options.max_seq_len) break;
    kept += n;
    --first;
  }
  // Skip trailing empty visits so there is at least one code to keep.
  std::size_t newest = patient.visits.size();
  while (newest > 0 && patient.visits[newest - 1].codes.empty()) --newest;
  const bool split_newest = kept == 0;

  ModelInput out;
  out.prolonged_los_label = derive_prolonged_los_label(patient);
  out.outcome_label = patient.outcome_label;
  std::int32_t visit_id = 0;
  const std::size_t begin = split_newest ? newest - 1 : first;
  for (std::size_t v = begin; v < patient.visits.size(); ++v) {
    const auto& codes = patient.visits[v].codes;
    if (codes.empty()) continue;
    ++visit_id;
    const std::size_t take = split_newest ? options.max_seq_len : codes.size();
    for (std::size_t c = 0; c < take; ++c) {
      out.code_ids.push_back(vocab.id(codes[c].code));
      out.serialization_ids.push_back(options.constant_serialization ? 0 : static_cast<std::int32_t>(c));
      out.visit_ids.push_back(visit_id);
    }
  }
  out.length = out.code_ids.size();
  return out;
}

/// Code strings of the non-pad positions, in order.
inline std::vector<std::string> decode_codes(const ModelInput& input, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(input.length);
  for (std::size_t i = 0; i < input.length; ++i) out.push_back(vocab.token(input.code_ids[i]));
  return out;
}

/// Empty string when the ModelInput invariants hold.
inline std::string validate_input(const ModelInput& in, std::size_t max_seq_len) {
  const std::size_t n = in.code_ids.size();
  if (in.serialization_ids.size() != n || in.visit_ids.size() != n) return "stream lengths differ";
  if (in.length > n) return "length exceeds stream size";
  if (in.length > max_seq_len) return "length exceeds max_seq_len";
  for (std::size_t i = 0; i < in.length; ++i) {
    if (i == 0) {
      if (in.visit_ids[0] != 1) return "visit ids must start at 1";
      if (in.serialization_ids[0] != 0) return "serialization must start at 0";
      continue;
    }
    const bool new_visit = in.visit_ids[i] != in.visit_ids[i - 1];
    if (in.visit_ids[i] < in.visit_ids[i - 1]) return "visit ids decrease";
    if (new_visit && in.visit_ids[i] != in.visit_ids[i - 1] + 1) return "visit ids skip";
    if (new_visit && in.serialization_ids[i] != 0) return "serialization must restart at visit boundary";
    if (!new_visit && in.serialization_ids[i] != in.serialization_ids[i - 1] + 1 && in.serialization_ids[i] != 0)
      return "serialization ids must increase within a visit";
  }
  for (std::size_t i = in.length; i < n; ++i)
    if (in.code_ids[i] != kPadId || in.serialization_ids[i] != 0 || in.visit_ids[i] != 0) return "non-zero padding";
  return {};
}

}  // namespace ehrbert::ehr
