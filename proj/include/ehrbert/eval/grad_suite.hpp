// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "ehrbert/autodiff/grad_check.hpp"
#include "ehrbert/baselines/compose.hpp"

namespace ehrbert::eval {

/// Micro Med-BERT for gradient checking: 2 layers, 2 heads, hidden 32,
/// dropout off.
inline model::MedBertConfig micro_med_bert_config() {
  model::MedBertConfig c;
  c.vocab_size = 12;
  c.n_heads = 2;
  c.head_dim = 16;
  c.hidden_dim = 32;
  c.n_layers = 2;
  c.ffn_dim = 64;
  c.max_seq_len = 16;
  c.max_visits = 8;
  c.max_codes_per_visit = 4;
  c.dropout_rate = 0.0;
  return c;
}

struct GradSuiteConfig {
  model::MedBertConfig med_bert = micro_med_bert_config();
  std::size_t rnn_input = 3;
  std::size_t rnn_hidden = 4;
  std::size_t sequence_length = 5;
  ad::GradCheckOptions options;
  std::uint64_t seed = 1;
  /// Subset of {"med_bert", "gru", "bigru", "retain", "skipgram"}; empty runs all.
  std::vector<std::string> models;
};

struct GradSuiteResult {
  std::string model;
  ad::GradCheckReport report;
};

inline const std::vector<std::string>& grad_suite_models() {
  static const std::vector<std::string> names = {"med_bert", "gru", "bigru", "retain", "skipgram"};
  return names;
}

namespace detail {

inline void perturb(ad::ParameterStore<double>& store, Rng& rng, double sd) {
  for (std::size_t i = 0; i < store.size(); ++i)
    for (auto& v : store.at(i).value.values()) v += sd * rng.normal();
}

inline ad::Tensor<double> gaussian(std::size_t r, std::size_t c, Rng& rng) {
  ad::Tensor<double> t({r, c});
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

/// A three-visit patient over codes [3, vocab_size), padded by two rows.
inline ehr::ModelInput grad_patient(std::size_t vocab_size, std::size_t max_len) {
  ehr::ModelInput in;
  const std::size_t visit_sizes[] = {3, 2, 4};
  std::int32_t code = ehr::kNumReserved;
  for (std::size_t v = 0; v < 3; ++v)
    for (std::size_t k = 0; k < visit_sizes[v] && in.code_ids.size() < max_len; ++k) {
      in.code_ids.push_back(code);
      in.serialization_ids.push_back(static_cast<std::int32_t>(k));
      in.visit_ids.push_back(static_cast<std::int32_t>(v + 1));
      if (++code >= static_cast<std::int32_t>(vocab_size)) code = ehr::kNumReserved;
    }
  in.length = in.code_ids.size();
  return in.padded_to(std::min(in.length + 2, max_len));
}

}  // namespace detail

/// Float64 finite-difference checks of every trainable model: Med-BERT
/// (MLM + both pooled heads), GRU, Bi-GRU, RETAIN and the skip-gram loss.
inline std::vector<GradSuiteResult> run_grad_suite(const GradSuiteConfig& cfg) {
  cfg.med_bert.validate();
  if (cfg.med_bert.dropout_rate != 0.0) throw ConfigError("grad check needs dropout_rate = 0");
  std::vector<std::string> models = cfg.models.empty() ? grad_suite_models() : cfg.models;
  std::vector<GradSuiteResult> out;
  const std::size_t D = cfg.rnn_input, H = cfg.rnn_hidden, L = cfg.sequence_length;
  for (const auto& name : models) {
    // Per-model stream so a subset run checks the same weights as the full suite.
    std::uint64_t tag = 0;
    for (char ch : name) tag = tag * 131 + static_cast<unsigned char>(ch);
    Rng rng(derive_seed(cfg.seed, {0x677263ULL, tag}));
    ad::ParameterStore<double> store;
    ad::LossClosure<double> loss;
    std::optional<model::MedBert<double>> bert;
    std::optional<baselines::GruParams<double>> fw, bw;
    std::optional<baselines::RetainParams<double>> retain;
    std::vector<std::int32_t> centers, contexts, negatives;
    ad::GradCheckReport report;
    if (name == "med_bert") {
      if (cfg.med_bert.vocab_size < 8) throw ConfigError("grad check Med-BERT needs vocab_size >= 8");
      bert.emplace(cfg.med_bert, derive_seed(cfg.seed, {1}));
      detail::perturb(bert->store(), rng, 0.1);
      const auto in = detail::grad_patient(cfg.med_bert.vocab_size, cfg.med_bert.max_seq_len);
      const std::int32_t t1 = 4, t2 = static_cast<std::int32_t>(cfg.med_bert.vocab_size) - 1;
      loss = [&, in, t1, t2](ad::Tape<double>& t) {
        auto h = bert->forward(t, in, false, nullptr).hidden;
        const std::size_t pos[] = {0, in.length - 1};
        const std::int32_t targets[] = {t1, t2};
        auto mlm = ad::cross_entropy_logits(bert->mlm_logits(t, h, pos), std::span<const std::int32_t>(targets));
        auto los = ad::binary_cross_entropy_logit(bert->pooled_logit(t, h, in.length, model::kLosHead), true);
        auto cls = ad::binary_cross_entropy_logit(bert->pooled_logit(t, h, in.length, model::kClassifierHead), false);
        return mlm + los + cls;
      };
      report = ad::grad_check(loss, bert->store(), cfg.options);
      out.push_back({name, report});
      continue;
    }
    if (name == "gru" || name == "bigru") {
      fw = baselines::GruParams<double>::create(store, "f", D, H, rng, 0.5);
      if (name == "bigru") bw = baselines::GruParams<double>::create(store, "b", D, H, rng, 0.5);
      detail::perturb(store, rng, 0.2);
      auto& x = store.add("x", detail::gaussian(L, D, rng));
      auto& w = store.add("w", detail::gaussian(bw ? 2 * H : H, 1, rng));
      loss = [&](ad::Tape<double>& t) {
        auto h = baselines::gru_forward(t.param(x), *fw, bw ? &*bw : nullptr);
        return ad::binary_cross_entropy_logit(ad::matmul(h, t.param(w)), true);
      };
    } else if (name == "retain") {
      retain = baselines::RetainParams<double>::create(store, "r", D, H, H, rng, 0.5);
      detail::perturb(store, rng, 0.2);
      auto& v = store.add("v", detail::gaussian(L, D, rng));
      loss = [&](ad::Tape<double>& t) {
        return ad::binary_cross_entropy_logit(baselines::retain_forward(t.param(v), *retain, store).logit, true);
      };
    } else if (name == "skipgram") {
      const std::size_t V = 5, dim = 4, K = 2;
      auto& in = store.add("in", detail::gaussian(V, dim, rng));
      auto& outv = store.add("out", detail::gaussian(V, dim, rng));
      for (std::size_t i = 0; i < L; ++i) {
        centers.push_back(static_cast<std::int32_t>(rng.uniform_int(V)));
        contexts.push_back(static_cast<std::int32_t>(rng.uniform_int(V)));
        for (std::size_t k = 0; k < K; ++k) negatives.push_back(static_cast<std::int32_t>(rng.uniform_int(V)));
      }
      loss = [&](ad::Tape<double>& t) {
        return baselines::skipgram_loss(t.param(in), t.param(outv), centers, contexts, negatives);
      };
    } else {
      throw ConfigError("unknown grad check model '" + name + "'");
    }
    out.push_back({name, ad::grad_check(loss, store, cfg.options)});
  }
  return out;
}

}  // namespace ehrbert::eval
