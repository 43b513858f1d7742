// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrbert/core/error.hpp"
#include "ehrbert/ehr/record.hpp"

// Patient JSON-lines format, one patient per line:
//   {"patient_id": str, "outcome_label": bool|null,
//    "visits": [{"los_days": int,
//                "codes": [{"code": str, "poa": bool, "captured": bool, "priority": int}]}]}
// Visit indices are implied by array order. A missing or null los_days reads
// as 0. The prolonged-LOS label is always re-derived on read.

namespace ehrbert::ehr {

inline nlohmann::ordered_json patient_to_json(const PatientRecord& p) {
  nlohmann::ordered_json j;
  j["patient_id"] = p.patient_id;
  if (p.outcome_label)
    j["outcome_label"] = *p.outcome_label;
  else
    j["outcome_label"] = nullptr;
  auto visits = nlohmann::ordered_json::array();
  for (const auto& v : p.visits) {
    nlohmann::ordered_json jv;
    jv["los_days"] = v.los_days;
    auto codes = nlohmann::ordered_json::array();
    for (const auto& c : v.codes) {
      nlohmann::ordered_json jc;
      jc["code"] = c.code;
      jc["poa"] = c.present_on_admission;
      jc["captured"] = c.captured_during_visit;
      jc["priority"] = c.priority;
      codes.push_back(std::move(jc));
    }
    jv["codes"] = std::move(codes);
    visits.push_back(std::move(jv));
  }
  j["visits"] = std::move(visits);
  return j;
}

inline PatientRecord patient_from_json(const nlohmann::json& j) {
  PatientRecord p;
  try {
    p.patient_id = j.at("patient_id").get<std::string>();
    if (j.contains("outcome_label") && !j["outcome_label"].is_null()) p.outcome_label = j["outcome_label"].get<bool>();
    int index = 0;
    for (const auto& jv : j.at("visits")) {
      Visit v;
      v.visit_index = ++index;
      if (jv.contains("los_days") && !jv["los_days"].is_null()) v.los_days = jv["los_days"].get<int>();
      for (const auto& jc : jv.at("codes")) {
        DiagnosisCode c;
        c.code = jc.at("code").get<std::string>();
        c.present_on_admission = jc.value("poa", false);
        c.captured_during_visit = jc.value("captured", false);
        c.priority = jc.value("priority", 0);
        v.codes.push_back(std::move(c));
      }
      p.visits.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed patient record: ") + e.what());
  }
  p.prolonged_los_label = derive_prolonged_los_label(p);
  return p;
}

inline void write_jsonl(std::ostream& os, const std::vector<PatientRecord>& cohort) {
  for (const auto& p : cohort) os << patient_to_json(p).dump() << '\n';
}

inline void save_jsonl(const std::string& path, const std::vector<PatientRecord>& cohort) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  write_jsonl(os, cohort);
  if (!os) throw IoError("write failed for " + path);
}

inline std::vector<PatientRecord> read_jsonl(std::istream& is) {
  std::vector<PatientRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(patient_from_json(j));
  }
  return out;
}

inline std::vector<PatientRecord> load_jsonl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  return read_jsonl(is);
}

}  // namespace ehrbert::ehr
