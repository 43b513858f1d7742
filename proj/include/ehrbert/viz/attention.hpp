// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrbert/core/format.hpp"
#include "ehrbert/ehr/encode.hpp"
#include "ehrbert/model/med_bert.hpp"

namespace ehrbert::viz {

/// Attention maps of one patient, pads stripped.
struct AttentionRecord {
  std::string patient_id;
  std::vector<std::string> code_labels;
  /// First sequence index of each visit.
  std::vector<std::size_t> visit_boundaries;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  /// maps[layer][head]: length x length, row-major, row = query.
  std::vector<std::vector<std::vector<double>>> maps;

  std::size_t length() const { return code_labels.size(); }

  /// Visit index (0-based) of every position.
  std::vector<std::size_t> visit_of() const {
    std::vector<std::size_t> out(length(), 0);
    for (std::size_t v = 0; v < visit_boundaries.size(); ++v)
      for (std::size_t i = visit_boundaries[v]; i < length(); ++i) out[i] = v;
    return out;
  }

  double weight(std::size_t layer, std::size_t head, std::size_t query, std::size_t key) const {
    return maps[layer][head][query * length() + key];
  }

  void validate() const {
    const std::size_t L = length();
    if (L == 0) throw ContractError("AttentionRecord: empty sequence");
    if (visit_boundaries.empty() || visit_boundaries[0] != 0) throw ContractError("AttentionRecord: bad visit boundaries");
    for (std::size_t v = 1; v < visit_boundaries.size(); ++v)
      if (visit_boundaries[v] <= visit_boundaries[v - 1] || visit_boundaries[v] >= L)
        throw ContractError("AttentionRecord: visit boundaries must increase inside the sequence");
    if (maps.size() != n_layers) throw ContractError("AttentionRecord: layer count differs from maps");
    for (const auto& layer : maps) {
      if (layer.size() != n_heads) throw ContractError("AttentionRecord: head count differs from maps");
      for (const auto& m : layer) {
        if (m.size() != L * L) throw ContractError("AttentionRecord: map is not length x length");
        for (std::size_t i = 0; i < L; ++i) {
          double s = 0;
          for (std::size_t j = 0; j < L; ++j) s += m[i * L + j];
          if (std::abs(s - 1.0) > 1e-6) throw ContractError("AttentionRecord: row does not sum to 1");
        }
      }
    }
  }

  nlohmann::json to_json() const {
    return {{"patient_id", patient_id}, {"code_labels", code_labels}, {"visit_boundaries", visit_boundaries},
            {"n_layers", n_layers},     {"n_heads", n_heads},         {"maps", maps}};
  }

  static AttentionRecord from_json(const nlohmann::json& j) {
    AttentionRecord r;
    try {
      r.patient_id = j.at("patient_id").get<std::string>();
      r.code_labels = j.at("code_labels").get<std::vector<std::string>>();
      r.visit_boundaries = j.at("visit_boundaries").get<std::vector<std::size_t>>();
      r.n_layers = j.at("n_layers").get<std::size_t>();
      r.n_heads = j.at("n_heads").get<std::size_t>();
      r.maps = j.at("maps").get<std::vector<std::vector<std::vector<double>>>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed attention record: ") + e.what());
    }
    r.validate();
    return r;
  }

  friend bool operator==(const AttentionRecord&, const AttentionRecord&) = default;
};

/// Eval-mode forward pass capturing every layer and head.
template <typename T>
AttentionRecord extract_attention(const model::MedBert<T>& model, const ehr::PatientRecord& patient,
                                  const ehr::Vocabulary& vocab) {
  const auto& cfg = model.config();
  if (vocab.size() != cfg.vocab_size)
    throw ConfigError("extract_attention: vocabulary has " + std::to_string(vocab.size()) + " tokens, model expects " +
                      std::to_string(cfg.vocab_size));
  ehr::EncodeOptions opt;
  opt.max_seq_len = cfg.max_seq_len;
  const auto input = ehr::encode_patient(patient, vocab, opt);
  ad::Tape<T> tape;
  const auto out = model.forward(tape, input, false, nullptr, true);

  AttentionRecord rec;
  rec.patient_id = patient.patient_id;
  const std::size_t L = input.length;
  for (std::size_t i = 0; i < L; ++i) {
    rec.code_labels.push_back(vocab.token(input.code_ids[i]));
    if (i == 0 || input.visit_ids[i] != input.visit_ids[i - 1]) rec.visit_boundaries.push_back(i);
  }
  rec.n_layers = out.attention.size();
  rec.n_heads = rec.n_layers ? out.attention[0].size() : 0;
  for (const auto& layer : out.attention) {
    rec.maps.emplace_back();
    for (const auto& m : layer) {
      const std::size_t P = m.cols();
      std::vector<double> dense(L * L);
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) dense[i * L + j] = static_cast<double>(m.values()[i * P + j]);
      rec.maps.back().push_back(std::move(dense));
    }
  }
  return rec;
}

/// Loads the checkpoint (ConfigError on a type or config mismatch) first.
inline AttentionRecord extract_attention(const std::string& checkpoint, const ehr::PatientRecord& patient,
                                         const ehr::Vocabulary& vocab,
                                         const model::MedBertConfig* expected = nullptr) {
  return extract_attention(model::load_med_bert<double>(checkpoint, expected), patient, vocab);
}

namespace detail {

inline std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline const char* head_colour(std::size_t head) {
  static const char* const palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                        "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  return palette[head % 8];
}

}  // namespace detail

/// Self-contained HTML page with an inline SVG: queries on the left, keys
/// on the right, visits separated by rules, one `<line class="edge">` per
/// weight >= threshold with stroke width proportional to the weight.
/// `head` empty draws every head of the layer in its own colour.
inline std::string render_attention(const AttentionRecord& record, std::size_t layer, std::optional<std::size_t> head,
                                    double threshold = 0.05) {
  if (layer >= record.n_layers)
    throw RangeError("render_attention: layer " + std::to_string(layer) + " of " + std::to_string(record.n_layers));
  if (head && *head >= record.n_heads)
    throw RangeError("render_attention: head " + std::to_string(*head) + " of " + std::to_string(record.n_heads));
  if (!(threshold >= 0.0 && threshold < 1.0)) throw RangeError("render_attention: threshold must be in [0, 1)");

  const std::size_t L = record.length();
  const auto visit = record.visit_of();
  constexpr double kRow = 22, kGap = 14, kTop = 40, kLeft = 170, kRight = 430, kMaxStroke = 6;
  auto y_of = [&](std::size_t i) { return kTop + kRow * static_cast<double>(i) + kGap * static_cast<double>(visit[i]); };
  const double height = y_of(L - 1) + 2 * kRow;

  std::ostringstream os;
  os << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Attention "
     << detail::html_escape(record.patient_id) << "</title>\n"
     << "<style>body{font-family:sans-serif}text.node{font-size:12px}line.sep{stroke:#999;stroke-dasharray:4 3}"
        "</style></head><body>\n";
  os << "<h3>Patient " << detail::html_escape(record.patient_id) << ", layer " << layer << ", "
     << (head ? "head " + std::to_string(*head) : std::string("all heads")) << ", threshold "
     << detail::fixed(threshold, 3) << "</h3>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"" << detail::fixed(height, 0) << "\">\n";
  for (std::size_t v = 1; v < record.visit_boundaries.size(); ++v) {
    const double y = y_of(record.visit_boundaries[v]) - (kRow + kGap) / 2;
    os << "<line class=\"sep\" x1=\"10\" y1=\"" << detail::fixed(y) << "\" x2=\"590\" y2=\"" << detail::fixed(y)
       << "\"/>\n";
  }
  for (std::size_t i = 0; i < L; ++i) {
    const std::string label = detail::html_escape(record.code_labels[i]);
    const std::string y = detail::fixed(y_of(i) + 4);
    os << "<text class=\"node\" id=\"q" << i << "\" x=\"" << detail::fixed(kLeft - 8) << "\" y=\"" << y
       << "\" text-anchor=\"end\">" << label << "</text>\n";
    os << "<text class=\"node\" id=\"k" << i << "\" x=\"" << detail::fixed(kRight + 8) << "\" y=\"" << y << "\">"
       << label << "</text>\n";
  }
  const std::size_t h_lo = head ? *head : 0, h_hi = head ? *head + 1 : record.n_heads;
  for (std::size_t h = h_lo; h < h_hi; ++h) {
    os << "<g class=\"head\" data-head=\"" << h << "\">\n";
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        const double w = record.weight(layer, h, i, j);
        if (w < threshold) continue;
        os << "<line class=\"edge\" data-q=\"" << i << "\" data-k=\"" << j << "\" x1=\"" << detail::fixed(kLeft)
           << "\" y1=\"" << detail::fixed(y_of(i)) << "\" x2=\"" << detail::fixed(kRight) << "\" y2=\""
           << detail::fixed(y_of(j)) << "\" stroke=\"" << detail::head_colour(h) << "\" stroke-width=\""
           << detail::fixed(kMaxStroke * w, 3) << "\" stroke-opacity=\"" << detail::fixed(0.2 + 0.8 * w, 3)
           << "\"/>\n";
      }
    os << "</g>\n";
  }
  os << "</svg>\n</body></html>\n";
  return os.str();
}

struct LocalityStat {
  std::size_t layer = 0, head = 0;
  /// Mean over queries of the mass on keys in the query's visit.
  double within_visit = 0;
  double cross_visit = 0;
  /// Mean mass on keys with the query's code label in a different visit.
  double same_code_cross_visit = 0;
};

inline std::vector<LocalityStat> summarize_locality(const AttentionRecord& record) {
  const std::size_t L = record.length();
  const auto visit = record.visit_of();
  std::vector<LocalityStat> out;
  for (std::size_t l = 0; l < record.n_layers; ++l)
    for (std::size_t h = 0; h < record.n_heads; ++h) {
      LocalityStat s{l, h, 0, 0, 0};
      for (std::size_t i = 0; i < L; ++i) {
        double within = 0, cross = 0, same = 0;
        for (std::size_t j = 0; j < L; ++j) {
          const double w = record.weight(l, h, i, j);
          if (visit[j] == visit[i]) {
            within += w;
          } else {
            cross += w;
            if (record.code_labels[j] == record.code_labels[i]) same += w;
          }
        }
        s.within_visit += within;
        s.cross_visit += cross;
        s.same_code_cross_visit += same;
      }
      s.within_visit /= static_cast<double>(L);
      s.cross_visit /= static_cast<double>(L);
      s.same_code_cross_visit /= static_cast<double>(L);
      out.push_back(s);
    }
  return out;
}

inline std::string locality_csv(const std::vector<LocalityStat>& stats) {
  std::ostringstream os;
  os << "layer,head,within_visit,cross_visit,same_code_cross_visit\n";
  for (const auto& s : stats)
    os << s.layer << ',' << s.head << ',' << format_double(s.within_visit) << ',' << format_double(s.cross_visit)
       << ',' << format_double(s.same_code_cross_visit) << '\n';
  return os.str();
}

}  // namespace ehrbert::viz
