// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrbert/autodiff/adamw.hpp"
#include "ehrbert/autodiff/checkpoint.hpp"
#include "ehrbert/autodiff/ops.hpp"
#include "ehrbert/core/random.hpp"
#include "ehrbert/ehr/encode.hpp"

namespace ehrbert::baselines {

struct SkipGramConfig {
  std::size_t dim = 32;
  std::size_t window = 5;
  std::size_t negatives = 5;
  std::size_t steps = 2000;
  std::size_t batch_size = 128;
  double lr = 0.01;
  std::uint64_t seed = 1;

  void validate() const {
    if (dim == 0 || window == 0 || steps == 0 || batch_size == 0)
      throw ConfigError("SkipGramConfig: dim, window, steps and batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("SkipGramConfig.lr must be positive");
  }
};

/// Trained tables: "in" vectors are the code embeddings handed to the
/// baselines, "out" vectors score contexts.
struct SkipGramParams {
  ad::Tensor<float> in, out;
  std::size_t window = 0;
  std::size_t negatives = 0;
};

inline constexpr const char* kSkipGramCheckpointType = "skipgram";

/// Negative-sampling loss for a batch of (center, context) pairs, each with
/// `negatives.size() / centers.size()` sampled noise codes:
///   mean over pairs of  -log sig(u_c . v_o) - sum_k log sig(-u_c . v_k)
template <typename T>
ad::Var<T> skipgram_loss(ad::Var<T> in_table, ad::Var<T> out_table, const std::vector<std::int32_t>& centers,
                         const std::vector<std::int32_t>& contexts, const std::vector<std::int32_t>& negatives) {
  const std::size_t B = centers.size();
  if (B == 0 || contexts.size() != B || negatives.size() % B != 0)
    throw ContractError("skipgram_loss: inconsistent batch");
  const std::size_t K = negatives.size() / B;
  auto rowdot = [](ad::Var<T> a, ad::Var<T> b) { return ad::sum(a * b, 1); };
  auto u = ad::embedding_lookup(in_table, std::span<const std::int32_t>(centers));
  auto v = ad::embedding_lookup(out_table, std::span<const std::int32_t>(contexts));
  const std::vector<T> ones(B, T(1));
  auto loss = ad::binary_cross_entropy_logit(rowdot(u, v), std::span<const T>(ones));
  if (K == 0) return loss;
  std::vector<std::int32_t> rep;
  rep.reserve(B * K);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t k = 0; k < K; ++k) rep.push_back(centers[i]);
  auto un = ad::embedding_lookup(in_table, std::span<const std::int32_t>(rep));
  auto vn = ad::embedding_lookup(out_table, std::span<const std::int32_t>(negatives));
  const std::vector<T> zeros(B * K, T(0));
  auto neg = ad::binary_cross_entropy_logit(rowdot(un, vn), std::span<const T>(zeros));
  return loss + ad::affine(neg, static_cast<T>(K));
}

namespace detail {

/// Draws (center, context) pairs: a uniform position over all codes of
/// patients with at least two codes, then a uniform partner at distance
/// 1..window inside the same patient.
class PairSampler {
 public:
  PairSampler(const std::vector<ehr::ModelInput>& inputs, std::size_t window) : inputs_(inputs), window_(window) {
    std::vector<double> weights;
    for (std::size_t i = 0; i < inputs.size(); ++i)
      if (inputs[i].length >= 2) {
        usable_.push_back(i);
        weights.push_back(static_cast<double>(inputs[i].length));
      }
    if (usable_.empty()) throw EmptyCohort("train_skipgram: no patient has two or more codes");
    patients_ = DiscreteSampler(weights);
  }

  std::pair<std::int32_t, std::int32_t> operator()(Rng& rng) const {
    const auto& in = inputs_[usable_[patients_(rng)]];
    const auto c = static_cast<std::ptrdiff_t>(rng.uniform_int(in.length));
    const auto w = static_cast<std::ptrdiff_t>(window_);
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, c - w);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(in.length) - 1, c + w);
    auto o = lo + static_cast<std::ptrdiff_t>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo)));
    if (o >= c) ++o;
    return {in.code_ids[static_cast<std::size_t>(c)], in.code_ids[static_cast<std::size_t>(o)]};
  }

 private:
  const std::vector<ehr::ModelInput>& inputs_;
  std::size_t window_;
  std::vector<std::size_t> usable_;
  DiscreteSampler patients_;
};

}  // namespace detail

/// Skip-gram with negative sampling over the flattened code sequences.
/// Noise codes follow unigram counts raised to 0.75; reserved ids are never
/// drawn. In-vectors start uniform in +-0.5/dim, out-vectors at zero.
inline SkipGramParams train_skipgram(const std::vector<ehr::ModelInput>& inputs, std::size_t vocab_size,
                                     const SkipGramConfig& config) {
  config.validate();
  if (inputs.empty()) throw EmptyCohort("train_skipgram: empty cohort");
  const std::size_t ordinary = vocab_size > static_cast<std::size_t>(ehr::kNumReserved)
                                   ? vocab_size - static_cast<std::size_t>(ehr::kNumReserved)
                                   : 0;
  if (ordinary < config.negatives + 1)
    throw ConfigError("train_skipgram: " + std::to_string(ordinary) + " codes cannot supply " +
                      std::to_string(config.negatives) + " negatives plus a positive");
  std::vector<double> counts(vocab_size, 0.0);
  for (const auto& in : inputs)
    for (std::size_t i = 0; i < in.length; ++i) counts.at(static_cast<std::size_t>(in.code_ids[i])) += 1.0;
  for (std::int32_t r = 0; r < ehr::kNumReserved; ++r) counts[static_cast<std::size_t>(r)] = 0.0;
  for (auto& c : counts) c = std::pow(c, 0.75);
  const DiscreteSampler noise(counts);
  const detail::PairSampler pairs(inputs, config.window);

  Rng init(derive_seed(config.seed, {1}));
  ad::ParameterStore<float> store;
  ad::Tensor<float> in_table({vocab_size, config.dim});
  const double half = 0.5 / static_cast<double>(config.dim);
  for (auto& x : in_table.values()) x = static_cast<float>((init.uniform() * 2.0 - 1.0) * half);
  auto& in_p = store.add("sg.in", std::move(in_table), false);
  auto& out_p = store.add("sg.out", ad::Tensor<float>({vocab_size, config.dim}, 0.0f), false);
  ad::AdamWConfig opt;
  opt.lr = config.lr;
  opt.weight_decay = 0.0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    Rng rng(derive_seed(config.seed, {2, step}));
    std::vector<std::int32_t> centers, contexts, negatives;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const auto [c, o] = pairs(rng);
      centers.push_back(c);
      contexts.push_back(o);
      for (std::size_t k = 0; k < config.negatives; ++k) negatives.push_back(static_cast<std::int32_t>(noise(rng)));
    }
    ad::Tape<float> tape;
    ad::backward(tape, skipgram_loss(tape.param(in_p), tape.param(out_p), centers, contexts, negatives));
    ad::adamw_step(store, opt);
  }
  return SkipGramParams{in_p.value, out_p.value, config.window, config.negatives};
}

inline void save_skipgram(const std::string& path, const SkipGramParams& p) {
  ad::ParameterStore<float> store;
  store.add("sg.in", p.in, false);
  store.add("sg.out", p.out, false);
  ad::save_checkpoint(path, store, kSkipGramCheckpointType,
                      nlohmann::json{{"window", p.window}, {"negatives", p.negatives}});
}

inline SkipGramParams load_skipgram(const std::string& path) {
  const auto data = ad::read_checkpoint(path);
  if (data.header.type != kSkipGramCheckpointType)
    throw ConfigError("checkpoint " + path + " has type '" + data.header.type + "', expected skipgram");
  const auto* in = data.find("sg.in");
  const auto* out = data.find("sg.out");
  if (!in || !out) throw ConfigError("skip-gram checkpoint " + path + " lacks its tables");
  SkipGramParams p;
  p.in = ad::Tensor<double>(in->shape, in->value).cast<float>();
  p.out = ad::Tensor<double>(out->shape, out->value).cast<float>();
  p.window = data.header.config.value("window", std::size_t{0});
  p.negatives = data.header.config.value("negatives", std::size_t{0});
  return p;
}

}  // namespace ehrbert::baselines
