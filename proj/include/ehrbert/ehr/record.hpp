// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ehrbert/core/error.hpp"

namespace ehrbert::ehr {

/// A visit stay longer than this many days is "prolonged".
inline constexpr int kProlongedStayDays = 7;

struct DiagnosisCode {
  std::string code;
  bool present_on_admission = false;
  bool captured_during_visit = false;
  int priority = 0;  // lower value = higher priority

  friend bool operator==(const DiagnosisCode&, const DiagnosisCode&) = default;
};

struct Visit {
  std::vector<DiagnosisCode> codes;
  int los_days = 0;
  int visit_index = 1;  // 1-based position in the patient timeline

  friend bool operator==(const Visit&, const Visit&) = default;
};

struct PatientRecord {
  std::string patient_id;
  std::vector<Visit> visits;
  std::optional<bool> outcome_label;
  bool prolonged_los_label = false;

  std::size_t total_codes() const {
    std::size_t n = 0;
    for (const auto& v : visits) n += v.codes.size();
    return n;
  }

  friend bool operator==(const PatientRecord&, const PatientRecord&) = default;
};

/// Sorts codes by (present on admission first, captured during the visit
/// first, ascending priority). Ties keep their input order.
inline Visit order_codes_within_visit(const Visit& visit) {
  if (visit.codes.empty()) throw EmptyVisit("order_codes_within_visit: visit has no codes");
  Visit out = visit;
  std::stable_sort(out.codes.begin(), out.codes.end(),
                   [](const DiagnosisCode& a, const DiagnosisCode& b) {
                     if (a.present_on_admission != b.present_on_admission)
                       return a.present_on_admission;
                     if (a.captured_during_visit != b.captured_during_visit)
                       return a.captured_during_visit;
                     return a.priority < b.priority;
                   });
  return out;
}

inline PatientRecord order_patient_codes(const PatientRecord& patient) {
  PatientRecord out = patient;
  for (auto& v : out.visits) v = order_codes_within_visit(v);
  return out;
}

/// Patient-level label: true iff any visit lasted more than seven days.
inline bool derive_prolonged_los_label(const PatientRecord& patient) {
  return std::any_of(patient.visits.begin(), patient.visits.end(),
                     [](const Visit& v) { return v.los_days > kProlongedStayDays; });
}

/// Checks the structural invariants of a record: contiguous 1-based visit
/// indices, non-empty visits with non-empty code strings, and los_days >= 0.
/// Returns an empty string when valid, otherwise a description.
inline std::string validate_record(const PatientRecord& p, std::size_t min_codes = 3) {
  if (p.patient_id.empty()) return "empty patient_id";
  for (std::size_t i = 0; i < p.visits.size(); ++i) {
    const Visit& v = p.visits[i];
    if (v.visit_index != static_cast<int>(i) + 1) return "visit_index not contiguous";
    if (v.codes.empty()) return "empty visit";
    if (v.los_days < 0) return "negative los_days";
    for (const auto& c : v.codes)
      if (c.code.empty()) return "empty code string";
  }
  if (p.total_codes() < min_codes) return "fewer codes than required";
  return {};
}

}  // namespace ehrbert::ehr
