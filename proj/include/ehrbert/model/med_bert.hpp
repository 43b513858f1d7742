// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrbert/autodiff/checkpoint.hpp"
#include "ehrbert/autodiff/ops.hpp"
#include "ehrbert/autodiff/parameter_store.hpp"
#include "ehrbert/core/error.hpp"
#include "ehrbert/core/random.hpp"
#include "ehrbert/ehr/encode.hpp"

namespace ehrbert::model {

struct MedBertConfig {
  std::size_t vocab_size = 0;
  std::size_t n_heads = 2;
  std::size_t head_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t n_layers = 2;
  std::size_t ffn_dim = 128;
  std::size_t max_seq_len = 128;
  std::size_t max_visits = 128;
  std::size_t max_codes_per_visit = 64;
  double dropout_rate = 0.1;
  double init_std = 0.02;
  double layer_norm_eps = 1e-12;
  bool pre_norm = false;
  bool tie_mlm_weights = false;

  /// Small configuration used for everything that runs on a desk.
  static MedBertConfig desk(std::size_t vocab_size) {
    MedBertConfig c;
    c.vocab_size = vocab_size;
    return c;
  }

  /// Full-size configuration (6 layers, 6 heads x 32, sequence length 512).
  static MedBertConfig full(std::size_t vocab_size) {
    MedBertConfig c;
    c.vocab_size = vocab_size;
    c.n_layers = 6;
    c.n_heads = 6;
    c.head_dim = 32;
    c.hidden_dim = 192;
    c.ffn_dim = 4 * 192;
    c.max_seq_len = 512;
    c.max_visits = 512;
    return c;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("MedBertConfig.") + name + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(n_heads, "n_heads");
    positive(head_dim, "head_dim");
    positive(hidden_dim, "hidden_dim");
    positive(n_layers, "n_layers");
    positive(ffn_dim, "ffn_dim");
    positive(max_seq_len, "max_seq_len");
    positive(max_visits, "max_visits");
    positive(max_codes_per_visit, "max_codes_per_visit");
    if (hidden_dim != n_heads * head_dim)
      throw ConfigError("MedBertConfig.hidden_dim must equal n_heads * head_dim (" + std::to_string(n_heads) + " * " +
                        std::to_string(head_dim) + " != " + std::to_string(hidden_dim) + ")");
    if (vocab_size <= static_cast<std::size_t>(ehr::kNumReserved)) throw ConfigError("MedBertConfig.vocab_size must exceed the reserved tokens");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("MedBertConfig.dropout_rate must be in [0,1)");
    if (!(init_std > 0.0)) throw ConfigError("MedBertConfig.init_std must be positive");
    if (!(layer_norm_eps > 0.0)) throw ConfigError("MedBertConfig.layer_norm_eps must be positive");
  }

  friend bool operator==(const MedBertConfig&, const MedBertConfig&) = default;
};

inline void to_json(nlohmann::json& j, const MedBertConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},
                     {"n_heads", c.n_heads},
                     {"head_dim", c.head_dim},
                     {"hidden_dim", c.hidden_dim},
                     {"n_layers", c.n_layers},
                     {"ffn_dim", c.ffn_dim},
                     {"max_seq_len", c.max_seq_len},
                     {"max_visits", c.max_visits},
                     {"max_codes_per_visit", c.max_codes_per_visit},
                     {"dropout_rate", c.dropout_rate},
                     {"init_std", c.init_std},
                     {"layer_norm_eps", c.layer_norm_eps},
                     {"pre_norm", c.pre_norm},
                     {"tie_mlm_weights", c.tie_mlm_weights}};
}

inline void from_json(const nlohmann::json& j, MedBertConfig& c) {
  MedBertConfig d;
  try {
    for (const auto& [key, _] : j.items()) {
      static const char* known[] = {"vocab_size", "n_heads",    "head_dim",       "hidden_dim",
                                    "n_layers",   "ffn_dim",    "max_seq_len",    "max_visits",
                                    "max_codes_per_visit", "dropout_rate", "init_std", "layer_norm_eps",
                                    "pre_norm",   "tie_mlm_weights"};
      if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
          std::end(known))
        throw ConfigError("MedBertConfig: unknown key '" + key + "'");
    }
    d.vocab_size = j.value("vocab_size", d.vocab_size);
    d.n_heads = j.value("n_heads", d.n_heads);
    d.head_dim = j.value("head_dim", d.head_dim);
    d.hidden_dim = j.value("hidden_dim", d.hidden_dim);
    d.n_layers = j.value("n_layers", d.n_layers);
    d.ffn_dim = j.value("ffn_dim", d.ffn_dim);
    d.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    d.max_visits = j.value("max_visits", d.max_visits);
    d.max_codes_per_visit = j.value("max_codes_per_visit", d.max_codes_per_visit);
    d.dropout_rate = j.value("dropout_rate", d.dropout_rate);
    d.init_std = j.value("init_std", d.init_std);
    d.layer_norm_eps = j.value("layer_norm_eps", d.layer_norm_eps);
    d.pre_norm = j.value("pre_norm", d.pre_norm);
    d.tie_mlm_weights = j.value("tie_mlm_weights", d.tie_mlm_weights);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("MedBertConfig: ") + e.what());
  }
  c = d;
}

/// true marks a padding position.
inline std::vector<bool> pad_mask_of(const ehr::ModelInput& input) {
  std::vector<bool> mask(input.padded_size(), false);
  for (std::size_t i = input.length; i < mask.size(); ++i) mask[i] = true;
  return mask;
}

template <typename T>
struct EncoderOutput {
  ad::Var<T> hidden;
  /// attention[layer][head] is a [length x length] probability matrix
  /// (after masking, before attention dropout). Empty unless requested.
  std::vector<std::vector<ad::Tensor<T>>> attention;
};

/// Names of the two pooled heads.
inline constexpr const char* kLosHead = "los";
inline constexpr const char* kClassifierHead = "cls";

/// Med-BERT encoder with masked-LM head and two pooled binary heads.
/// Parameters live in an owned ParameterStore under stable names:
///   emb.{code,serial,visit}, enc.<l>.*, mlm.*, los.*, cls.*
template <typename T>
class MedBert {
 public:
  MedBert(const MedBertConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(derive_seed(seed, {0x6d656462ULL}));
    const std::size_t H = config_.hidden_dim, F = config_.ffn_dim, V = config_.vocab_size;
    const double sd = config_.init_std;
    store_.add_normal("emb.code", {V, H}, rng, sd);
    store_.add_normal("emb.serial", {config_.max_codes_per_visit, H}, rng, sd);
    store_.add_normal("emb.visit", {config_.max_visits + 1, H}, rng, sd);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      for (const char* m : {"q", "k", "v", "o"}) {
        store_.add_normal(p + "attn.w" + m, {H, H}, rng, sd);
        store_.add_constant(p + "attn.b" + m, {H}, T(0));
      }
      store_.add_constant(p + "attn_ln.gain", {H}, T(1));
      store_.add_constant(p + "attn_ln.bias", {H}, T(0));
      store_.add_normal(p + "ffn.w1", {H, F}, rng, sd);
      store_.add_constant(p + "ffn.b1", {F}, T(0));
      store_.add_normal(p + "ffn.w2", {F, H}, rng, sd);
      store_.add_constant(p + "ffn.b2", {H}, T(0));
      store_.add_constant(p + "ffn_ln.gain", {H}, T(1));
      store_.add_constant(p + "ffn_ln.bias", {H}, T(0));
    }
    if (config_.pre_norm) {
      store_.add_constant("enc.final_ln.gain", {H}, T(1));
      store_.add_constant("enc.final_ln.bias", {H}, T(0));
    }
    store_.add_normal("mlm.dense.w", {H, H}, rng, sd);
    store_.add_constant("mlm.dense.b", {H}, T(0));
    store_.add_constant("mlm.ln.gain", {H}, T(1));
    store_.add_constant("mlm.ln.bias", {H}, T(0));
    if (!config_.tie_mlm_weights) store_.add_normal("mlm.out.w", {H, V}, rng, sd);
    store_.add_constant("mlm.out.b", {V}, T(0));
    add_pooled_head(kLosHead, rng);
    add_pooled_head(kClassifierHead, rng);
  }

  const MedBertConfig& config() const { return config_; }
  ad::ParameterStore<T>& store() { return store_; }
  const ad::ParameterStore<T>& store() const { return store_; }

  /// Re-draws a pooled head's parameters (used when fine-tuning starts).
  void reinitialize_head(const std::string& head, std::uint64_t seed) {
    Rng rng(seed);
    for (const char* w : {".ffl.w", ".out.w"}) {
      auto& p = store_.get(head + w);
      for (auto& x : p.value.values()) x = static_cast<T>(rng.truncated_normal(config_.init_std));
    }
    for (const char* b : {".ffl.b", ".out.b"}) {
      auto& p = store_.get(head + b);
      std::fill(p.value.values().begin(), p.value.values().end(), T(0));
    }
    for (const char* n : {".ffl.w", ".ffl.b", ".out.w", ".out.b"}) {
      auto& p = store_.get(head + n);
      std::fill(p.m.begin(), p.m.end(), T(0));
      std::fill(p.v.begin(), p.v.end(), T(0));
    }
  }

  /// Sum of code, serialization and visit embeddings, then dropout.
  /// Serialization ids beyond the table clamp to its last row.
  ad::Var<T> embed(ad::Tape<T>& tape, const ehr::ModelInput& input, bool train, Rng* rng) const {
    const std::size_t n = input.padded_size();
    if (n == 0) throw ShapeError("embed: empty input");
    if (input.serialization_ids.size() != n || input.visit_ids.size() != n)
      throw ShapeError("embed: id streams differ in length");
    const auto limit = static_cast<std::int32_t>(config_.max_codes_per_visit - 1);
    std::vector<std::int32_t> serial(input.serialization_ids);
    for (auto& s : serial) s = s > limit ? limit : s;
    auto codes = ad::embedding_lookup(tape.param(param("emb.code")), std::span<const std::int32_t>(input.code_ids));
    auto ser = ad::embedding_lookup(tape.param(param("emb.serial")), std::span<const std::int32_t>(serial));
    auto vis = ad::embedding_lookup(tape.param(param("emb.visit")), std::span<const std::int32_t>(input.visit_ids));
    return dropout(codes + ser + vis, train, rng);
  }

  /// Transformer stack over `embedded` ([n x hidden]). Keys flagged in
  /// pad_mask receive an additive -1e9 before the softmax.
  EncoderOutput<T> encode(ad::Tape<T>& tape, ad::Var<T> embedded, const std::vector<bool>& pad_mask, bool train,
                          Rng* rng, bool capture_attention = false) const {
    const std::size_t n = embedded.rows(), H = config_.hidden_dim;
    if (embedded.cols() != H)
      throw ShapeError("encode(embedded)", embedded.shape(), ad::Shape{n, H});
    if (pad_mask.size() != n) throw ShapeError("encode: pad mask has " + std::to_string(pad_mask.size()) +
                                               " entries for " + std::to_string(n) + " rows");
    if (n > config_.max_seq_len)
      throw ShapeError("encode: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                       std::to_string(config_.max_seq_len));
    std::optional<ad::Var<T>> key_bias;
    if (std::find(pad_mask.begin(), pad_mask.end(), true) != pad_mask.end()) {
      ad::Tensor<T> bias({1, n});
      for (std::size_t j = 0; j < n; ++j) bias[j] = pad_mask[j] ? T(-1e9) : T(0);
      key_bias = tape.constant(std::move(bias));
    }
    EncoderOutput<T> out;
    if (capture_attention) out.attention.resize(config_.n_layers);
    const T eps = static_cast<T>(config_.layer_norm_eps);
    ad::Var<T> x = embedded;
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      auto ln = [&](ad::Var<T> v, const char* which) {
        return ad::layer_norm(v, tape.param(param(p + which + ".gain")), tape.param(param(p + which + ".bias")), eps);
      };
      ad::Var<T> a_in = config_.pre_norm ? ln(x, "attn_ln") : x;
      ad::Var<T> attn = attention(tape, a_in, p, key_bias, train, rng,
                                  capture_attention ? &out.attention[l] : nullptr);
      x = config_.pre_norm ? x + attn : ln(x + attn, "attn_ln");
      ad::Var<T> f_in = config_.pre_norm ? ln(x, "ffn_ln") : x;
      ad::Var<T> h = ad::gelu(dense(tape, f_in, p + "ffn.w1", p + "ffn.b1"));
      ad::Var<T> f = dropout(dense(tape, h, p + "ffn.w2", p + "ffn.b2"), train, rng);
      x = config_.pre_norm ? x + f : ln(x + f, "ffn_ln");
    }
    if (config_.pre_norm)
      x = ad::layer_norm(x, tape.param(param("enc.final_ln.gain")), tape.param(param("enc.final_ln.bias")), eps);
    out.hidden = x;
    return out;
  }

  /// embed + encode for a (possibly padded) input.
  EncoderOutput<T> forward(ad::Tape<T>& tape, const ehr::ModelInput& input, bool train, Rng* rng,
                           bool capture_attention = false) const {
    return encode(tape, embed(tape, input, train, rng), pad_mask_of(input), train, rng, capture_attention);
  }

  /// Vocabulary logits [positions.size() x vocab] at the given rows.
  ad::Var<T> mlm_logits(ad::Tape<T>& tape, ad::Var<T> hidden, std::span<const std::size_t> positions) const {
    if (positions.empty()) throw ContractError("mlm_logits: no positions");
    std::vector<std::int32_t> rows;
    rows.reserve(positions.size());
    for (std::size_t pos : positions) {
      if (pos >= hidden.rows())
        throw RangeError("mlm_logits: position " + std::to_string(pos) + " outside sequence of length " +
                         std::to_string(hidden.rows()));
      rows.push_back(static_cast<std::int32_t>(pos));
    }
    auto h = ad::gather_rows(hidden, std::span<const std::int32_t>(rows));
    h = ad::gelu(dense(tape, h, "mlm.dense.w", "mlm.dense.b"));
    h = ad::layer_norm(h, tape.param(param("mlm.ln.gain")), tape.param(param("mlm.ln.bias")),
                       static_cast<T>(config_.layer_norm_eps));
    ad::Var<T> logits = config_.tie_mlm_weights ? ad::matmul_nt(h, tape.param(param("emb.code")))
                                                : ad::matmul(h, tape.param(param("mlm.out.w")));
    return logits + tape.param(param("mlm.out.b"));
  }

  /// Mean of the first `length` hidden rows -> dense + gelu -> scalar logit.
  ad::Var<T> pooled_logit(ad::Tape<T>& tape, ad::Var<T> hidden, std::size_t length,
                          const std::string& head = kClassifierHead) const {
    if (length == 0) throw ContractError("pooled_logit: length must be >= 1");
    auto pooled = ad::mean_rows(hidden, length);
    auto h = ad::gelu(dense(tape, pooled, head + ".ffl.w", head + ".ffl.b"));
    return dense(tape, h, head + ".out.w", head + ".out.b");
  }

 private:
  void add_pooled_head(const std::string& head, Rng& rng) {
    const std::size_t H = config_.hidden_dim;
    store_.add_normal(head + ".ffl.w", {H, H}, rng, config_.init_std);
    store_.add_constant(head + ".ffl.b", {H}, T(0));
    store_.add_normal(head + ".out.w", {H, 1}, rng, config_.init_std);
    store_.add_constant(head + ".out.b", {1}, T(0));
  }

  ad::Parameter<T>& param(const std::string& name) const {
    return const_cast<ad::ParameterStore<T>&>(store_).get(name);
  }

  ad::Var<T> dense(ad::Tape<T>& tape, ad::Var<T> x, const std::string& w, const std::string& b) const {
    return ad::matmul(x, tape.param(param(w))) + tape.param(param(b));
  }

  ad::Var<T> dropout(ad::Var<T> x, bool train, Rng* rng) const {
    if (!train || config_.dropout_rate == 0.0) return x;
    if (rng == nullptr) throw ContractError("MedBert: training-mode forward needs an rng");
    return ad::dropout(x, config_.dropout_rate, true, *rng);
  }

  ad::Var<T> attention(ad::Tape<T>& tape, ad::Var<T> x, const std::string& p, const std::optional<ad::Var<T>>& key_bias,
                       bool train, Rng* rng, std::vector<ad::Tensor<T>>* capture) const {
    const std::size_t d = config_.head_dim;
    auto q = dense(tape, x, p + "attn.wq", p + "attn.bq");
    auto k = dense(tape, x, p + "attn.wk", p + "attn.bk");
    auto v = dense(tape, x, p + "attn.wv", p + "attn.bv");
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<ad::Var<T>> heads;
    heads.reserve(config_.n_heads);
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
      auto qh = ad::slice_cols(q, h * d, d), kh = ad::slice_cols(k, h * d, d), vh = ad::slice_cols(v, h * d, d);
      auto scores = ad::affine(ad::matmul_nt(qh, kh), scale);
      if (key_bias) scores = scores + *key_bias;
      auto probs = ad::softmax(scores, 1);
      if (capture) capture->push_back(probs.value());
      heads.push_back(ad::matmul(dropout(probs, train, rng), vh));
    }
    auto ctx = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
    return dropout(dense(tape, ctx, p + "attn.wo", p + "attn.bo"), train, rng);
  }

  MedBertConfig config_;
  ad::ParameterStore<T> store_;
};


inline constexpr const char* kMedBertCheckpointType = "med_bert";

template <typename T>
void save_med_bert(const std::string& path, const MedBert<T>& model) {
  ad::save_checkpoint(path, model.store(), kMedBertCheckpointType, nlohmann::json(model.config()));
}

/// Rebuilds a model from a checkpoint written by save_med_bert. The file's
/// config wins; `expected`, when given, must match it.
template <typename T>
MedBert<T> load_med_bert(const std::string& path, const MedBertConfig* expected = nullptr) {
  const auto data = ad::read_checkpoint(path);
  if (data.header.type != kMedBertCheckpointType)
    throw ConfigError("checkpoint " + path + " has type '" + data.header.type + "', expected med_bert");
  const auto config = data.header.config.get<MedBertConfig>();
  if (expected && !(*expected == config)) throw ConfigError("checkpoint " + path + " config does not match the model");
  MedBert<T> model(config, 0);
  ad::load_into(data, model.store());
  return model;
}

}  // namespace ehrbert::model
