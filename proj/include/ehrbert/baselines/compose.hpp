// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ehrbert/baselines/gru.hpp"
#include "ehrbert/baselines/retain.hpp"
#include "ehrbert/baselines/skipgram.hpp"
#include "ehrbert/model/med_bert.hpp"

namespace ehrbert::baselines {

enum class Family { med_bert_only, gru, bigru, retain };
enum class InputMode { none, skipgram, med_bert };

/// A predictor family paired with the source of its input sequence.
struct ModelSpec {
  Family family = Family::gru;
  InputMode input = InputMode::none;

  /// Row label, e.g. "GRU", "Bi-GRU+t-W2V", "RETAIN+Med-BERT", "Med-BERT_only (FFL)".
  std::string label() const {
    if (family == Family::med_bert_only) return "Med-BERT_only (FFL)";
    std::string base = family == Family::gru ? "GRU" : family == Family::bigru ? "Bi-GRU" : "RETAIN";
    if (input == InputMode::skipgram) base += "+t-W2V";
    if (input == InputMode::med_bert) base += "+Med-BERT";
    return base;
  }

  static ModelSpec parse(const std::string& label) {
    for (Family f : {Family::gru, Family::bigru, Family::retain, Family::med_bert_only})
      for (InputMode m : {InputMode::none, InputMode::skipgram, InputMode::med_bert}) {
        ModelSpec s{f, m};
        if (f == Family::med_bert_only && m != InputMode::med_bert) continue;
        if (s.label() == label) return s;
      }
    throw ConfigError("unknown model '" + label + "'");
  }

  void validate() const {
    if (family == Family::med_bert_only && input != InputMode::med_bert)
      throw ConfigError("Med-BERT_only requires Med-BERT inputs");
  }

  bool needs_med_bert() const { return input == InputMode::med_bert; }
  bool needs_skipgram() const { return input == InputMode::skipgram; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// The ten evaluation conditions: three baselines with each input source,
/// then Med-BERT with its own pooled head.
inline std::vector<ModelSpec> ex1_conditions() {
  std::vector<ModelSpec> out;
  for (Family f : {Family::gru, Family::bigru, Family::retain})
    for (InputMode m : {InputMode::none, InputMode::skipgram, InputMode::med_bert}) out.push_back({f, m});
  out.push_back({Family::med_bert_only, InputMode::med_bert});
  return out;
}

/// Pretrained inputs shared (read-only) by every predictor built from them.
template <typename T>
struct Artifacts {
  const model::MedBert<T>* med_bert = nullptr;
  const SkipGramParams* skipgram = nullptr;
};

struct PredictorConfig {
  std::size_t vocab_size = 0;
  /// Width of the learned code embeddings when not using Med-BERT.
  std::size_t embed_dim = 32;
  std::size_t rnn_hidden = 32;
  bool freeze_encoder = false;
  double init_std = 0.1;
};

/// Copy of a pretrained Med-BERT ready for fine-tuning: values copied,
/// optimizer state fresh, classifier head re-drawn from `seed`.
template <typename T>
model::MedBert<T> clone_for_finetune(const model::MedBert<T>& source, std::uint64_t seed) {
  model::MedBert<T> copy(source.config(), seed);
  copy.store().restore(source.store().snapshot());
  copy.reinitialize_head(model::kClassifierHead, derive_seed(seed, {0x636c73ULL}));
  return copy;
}

/// Rows [0, length) of an input: the tensors the baselines see never
/// include padding.
inline ehr::ModelInput unpadded(const ehr::ModelInput& in) {
  if (in.padded_size() == in.length) return in;
  ehr::ModelInput out = in;
  out.code_ids.resize(in.length);
  out.serialization_ids.resize(in.length);
  out.visit_ids.resize(in.length);
  return out;
}

/// Produces the per-code input sequence for a baseline:
///   none     -> freshly initialised learnable code embeddings
///   skipgram -> embeddings initialised from the skip-gram in-vectors
///   med_bert -> final Med-BERT hidden states, encoder trained jointly
///               (or frozen with PredictorConfig::freeze_encoder)
template <typename T>
class InputComposer {
 public:
  InputComposer(InputMode mode, const PredictorConfig& config, const Artifacts<T>& artifacts, std::uint64_t seed)
      : mode_(mode) {
    if (mode == InputMode::med_bert) {
      if (!artifacts.med_bert) throw ConfigError("Med-BERT input requested but no pretrained Med-BERT was given");
      bert_.emplace(clone_for_finetune(*artifacts.med_bert, seed));
      if (config.freeze_encoder) {
        for (const char* prefix : {"emb.", "enc."}) bert_->store().set_trainable(prefix, false);
      }
      return;
    }
    if (config.vocab_size == 0) throw ConfigError("PredictorConfig.vocab_size must be positive");
    if (mode == InputMode::skipgram) {
      if (!artifacts.skipgram) throw ConfigError("skip-gram input requested but no skip-gram embeddings were given");
      const auto& in = artifacts.skipgram->in;
      if (in.rows() != config.vocab_size)
        throw ConfigError("skip-gram table has " + std::to_string(in.rows()) + " rows for a vocabulary of " +
                          std::to_string(config.vocab_size));
      store_.add("input.embedding", in.template cast<T>());
    } else {
      Rng rng(derive_seed(seed, {0x656d62ULL}));
      store_.add_normal("input.embedding", {config.vocab_size, config.embed_dim}, rng, config.init_std);
    }
  }

  InputMode mode() const { return mode_; }

  std::size_t output_dim() const {
    return bert_ ? bert_->config().hidden_dim : store_.get("input.embedding").value.cols();
  }

  /// [length x output_dim] sequence for the real positions of `input`.
  ad::Var<T> compose(ad::Tape<T>& tape, const ehr::ModelInput& input, bool train, Rng* rng) const {
    if (input.length == 0) throw EmptyPatient("compose_inputs: input has no codes");
    if (bert_) return bert_->forward(tape, unpadded(input), train, rng).hidden;
    auto& table = const_cast<ad::ParameterStore<T>&>(store_).get("input.embedding");
    return ad::embedding_lookup(tape.param(table), std::span<const std::int32_t>(input.code_ids.data(), input.length));
  }

  model::MedBert<T>* med_bert() { return bert_ ? &*bert_ : nullptr; }
  const model::MedBert<T>* med_bert() const { return bert_ ? &*bert_ : nullptr; }

  /// Every store holding this composer's parameters.
  std::vector<ad::ParameterStore<T>*> stores() {
    if (bert_) return {&bert_->store()};
    return {&store_};
  }

 private:
  InputMode mode_;
  ad::ParameterStore<T> store_;
  std::optional<model::MedBert<T>> bert_;
};

/// Sums code rows per visit: [n_visits x D] from a [length x D] sequence.
template <typename T>
ad::Var<T> visit_sums(ad::Var<T> sequence, const ehr::ModelInput& input) {
  const std::size_t L = input.length;
  if (sequence.rows() != L) throw ShapeError("visit_sums: sequence rows differ from input length");
  const std::size_t V = input.num_visits();
  ad::Tensor<T> agg({V, L}, T(0));
  for (std::size_t i = 0; i < L; ++i) agg.at(static_cast<std::size_t>(input.visit_ids[i]) - 1, i) = T(1);
  return ad::matmul(sequence.tape().constant(std::move(agg)), sequence);
}

/// A full downstream model: composer + baseline (or Med-BERT pooled head).
template <typename T>
class Predictor {
 public:
  Predictor(const ModelSpec& spec, const PredictorConfig& config, const Artifacts<T>& artifacts, std::uint64_t seed)
      : spec_(spec), composer_((spec.validate(), spec.input), config, artifacts, seed) {
    Rng rng(derive_seed(seed, {0x686561ULL}));
    const std::size_t D = composer_.output_dim(), H = config.rnn_hidden;
    const double sd = config.init_std;
    switch (spec.family) {
      case Family::med_bert_only:
        break;
      case Family::gru:
      case Family::bigru: {
        forward_ = GruParams<T>::create(head_, "gru.fw", D, H, rng, sd);
        if (spec.family == Family::bigru) backward_ = GruParams<T>::create(head_, "gru.bw", D, H, rng, sd);
        const std::size_t out = spec.family == Family::bigru ? 2 * H : H;
        head_.add_normal("out.w", {out, 1}, rng, sd);
        head_.add_constant("out.b", {1}, T(0));
        break;
      }
      case Family::retain:
        retain_ = RetainParams<T>::create(head_, "retain", D, H, H, rng, sd);
        break;
    }
  }

  Predictor(Predictor&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  const InputComposer<T>& composer() const { return composer_; }

  /// Outcome logit [1 x 1].
  ad::Var<T> logit(ad::Tape<T>& tape, const ehr::ModelInput& input, bool train, Rng* rng) const {
    auto seq = composer_.compose(tape, input, train, rng);
    auto& head = const_cast<ad::ParameterStore<T>&>(head_);
    switch (spec_.family) {
      case Family::med_bert_only:
        return composer_.med_bert()->pooled_logit(tape, seq, input.length, model::kClassifierHead);
      case Family::gru:
      case Family::bigru: {
        auto h = gru_forward(seq, forward_, backward_ ? &*backward_ : nullptr);
        return ad::matmul(h, tape.param(head.get("out.w"))) + tape.param(head.get("out.b"));
      }
      case Family::retain:
        return retain_forward(visit_sums(seq, input), *retain_, head).logit;
    }
    throw ContractError("Predictor: unknown family");
  }

  std::vector<ad::ParameterStore<T>*> stores() {
    auto out = composer_.stores();
    if (head_.size() > 0) out.push_back(&head_);
    return out;
  }

  /// Parameter values of every store, for best-checkpoint tracking.
  std::vector<std::map<std::string, ad::Tensor<T>>> snapshot() {
    std::vector<std::map<std::string, ad::Tensor<T>>> out;
    for (auto* s : stores()) out.push_back(s->snapshot());
    return out;
  }

  void restore(const std::vector<std::map<std::string, ad::Tensor<T>>>& snap) {
    auto s = stores();
    if (s.size() != snap.size()) throw ContractError("Predictor::restore: snapshot shape differs");
    for (std::size_t i = 0; i < s.size(); ++i) s[i]->restore(snap[i]);
  }

 private:
  ModelSpec spec_;
  InputComposer<T> composer_;
  ad::ParameterStore<T> head_;
  GruParams<T> forward_;
  std::optional<GruParams<T>> backward_;
  std::optional<RetainParams<T>> retain_;
};

inline constexpr const char* kPredictorCheckpointType = "predictor";

/// Writes every parameter of a fine-tuned predictor into one checkpoint.
template <typename T>
void save_predictor(const std::string& path, Predictor<T>& model, const PredictorConfig& config) {
  ad::ParameterStore<T> merged;
  for (auto* s : model.stores())
    for (std::size_t i = 0; i < s->size(); ++i) merged.add(s->at(i).name, s->at(i).value, s->at(i).decay);
  ad::save_checkpoint(path, merged, kPredictorCheckpointType,
                      nlohmann::json{{"model", model.spec().label()},
                                     {"vocab_size", config.vocab_size},
                                     {"embed_dim", config.embed_dim},
                                     {"rnn_hidden", config.rnn_hidden},
                                     {"freeze_encoder", config.freeze_encoder}});
}

/// One AdamW step over several stores with a shared global clipping norm.
/// Stores without gradients (e.g. a frozen encoder) are skipped.
template <typename T>
double multi_store_step(const std::vector<ad::ParameterStore<T>*>& stores, ad::AdamWConfig config) {
  double sq = 0.0;
  bool any = false;
  for (auto* s : stores) {
    const double n = ad::gradient_norm(*s);
    sq += n * n;
    for (std::size_t i = 0; i < s->size(); ++i) any = any || (s->at(i).has_grad && s->at(i).trainable);
  }
  if (!any) throw ContractError("optimizer step without gradients");
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericsError("non-finite gradient norm");
  if (config.max_grad_norm > 0.0 && norm > config.max_grad_norm) {
    const T scale = static_cast<T>(config.max_grad_norm / norm);
    for (auto* s : stores)
      for (std::size_t i = 0; i < s->size(); ++i)
        for (auto& g : s->at(i).grad) g *= scale;
  }
  config.max_grad_norm = 0.0;
  for (auto* s : stores) {
    bool has = false;
    for (std::size_t i = 0; i < s->size(); ++i) has = has || (s->at(i).has_grad && s->at(i).trainable);
    if (has) {
      ad::adamw_step(*s, config);
    } else {
      s->zero_grad();
    }
  }
  return norm;
}

}  // namespace ehrbert::baselines
