// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "ehrbert/baselines/gru.hpp"

namespace ehrbert::baselines {

/// RETAIN over visit vectors [n_visits x D]. Parameters under <prefix>:
///   alpha_rnn.*, beta_rnn.*    reverse-time GRUs
///   alpha.w [Ha x 1], alpha.b  visit-level attention logits
///   beta.w [Hb x D], beta.b    variable-level attention
///   out.w [D x 1], out.b       classifier on the context vector
template <typename T>
struct RetainParams {
  GruParams<T> alpha_rnn, beta_rnn;
  std::string prefix;
  std::size_t input_dim = 0;

  static RetainParams create(ad::ParameterStore<T>& store, const std::string& prefix, std::size_t input_dim,
                             std::size_t alpha_hidden, std::size_t beta_hidden, Rng& rng, double stddev = 0.1) {
    RetainParams r;
    r.prefix = prefix;
    r.input_dim = input_dim;
    r.alpha_rnn = GruParams<T>::create(store, prefix + ".alpha_rnn", input_dim, alpha_hidden, rng, stddev);
    r.beta_rnn = GruParams<T>::create(store, prefix + ".beta_rnn", input_dim, beta_hidden, rng, stddev);
    store.add_normal(prefix + ".alpha.w", {alpha_hidden, 1}, rng, stddev);
    store.add_constant(prefix + ".alpha.b", {1}, T(0));
    store.add_normal(prefix + ".beta.w", {beta_hidden, input_dim}, rng, stddev);
    store.add_constant(prefix + ".beta.b", {input_dim}, T(0));
    store.add_normal(prefix + ".out.w", {input_dim, 1}, rng, stddev);
    store.add_constant(prefix + ".out.b", {1}, T(0));
    return r;
  }
};

template <typename T>
struct RetainOutput {
  ad::Var<T> logit;   // [1 x 1]
  ad::Var<T> alphas;  // [n_visits x 1], sums to 1
  ad::Var<T> betas;   // [n_visits x D], entries in [-1, 1]
};

/// Both attention RNNs read the visits newest-first; their states are put
/// back in visit order before the attention layers.
///   alpha = softmax_over_visits(g_j . w_a + b_a)
///   beta_j = tanh(h_j W_b + b_b)
///   c = sum_j alpha_j * (beta_j (.) v_j), logit = c . w_out + b_out
template <typename T>
RetainOutput<T> retain_forward(ad::Var<T> visits, const RetainParams<T>& p, ad::ParameterStore<T>& store) {
  if (visits.rows() == 0) throw ContractError("retain_forward: no visits");
  if (visits.cols() != p.input_dim)
    throw ShapeError("retain(visits)", visits.shape(), ad::Shape{visits.rows(), p.input_dim});
  ad::Tape<T>& tape = visits.tape();
  auto param = [&](const char* name) { return tape.param(store.get(p.prefix + name)); };
  auto reversed = reverse_rows(visits);
  auto g = reverse_rows(gru_states(reversed, p.alpha_rnn));
  auto h = reverse_rows(gru_states(reversed, p.beta_rnn));
  auto alphas = ad::softmax(ad::matmul(g, param(".alpha.w")) + param(".alpha.b"), 0);
  auto betas = ad::tanh(ad::matmul(h, param(".beta.w")) + param(".beta.b"));
  auto context = ad::matmul(ad::transpose(alphas), betas * visits);
  auto logit = ad::matmul(context, param(".out.w")) + param(".out.b");
  return {logit, alphas, betas};
}

}  // namespace ehrbert::baselines
