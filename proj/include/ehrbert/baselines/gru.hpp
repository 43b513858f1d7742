// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "ehrbert/autodiff/ops.hpp"
#include "ehrbert/autodiff/parameter_store.hpp"
#include "ehrbert/core/random.hpp"

namespace ehrbert::baselines {

/// One GRU direction, bound to parameters named <prefix>.{wx,bx,uzr,un}:
///   wx  [in x 3H]  input weights for the update, reset and candidate gates
///   bx  [3H]       gate biases
///   uzr [H x 2H]   recurrent weights for update and reset gates
///   un  [H x H]    recurrent weights for the candidate
template <typename T>
struct GruParams {
  ad::Parameter<T>* wx = nullptr;
  ad::Parameter<T>* bx = nullptr;
  ad::Parameter<T>* uzr = nullptr;
  ad::Parameter<T>* un = nullptr;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;

  static GruParams create(ad::ParameterStore<T>& store, const std::string& prefix, std::size_t input_dim,
                          std::size_t hidden_dim, Rng& rng, double stddev = 0.1) {
    if (input_dim == 0 || hidden_dim == 0) throw ConfigError("GRU dimensions must be positive");
    store.add_normal(prefix + ".wx", {input_dim, 3 * hidden_dim}, rng, stddev);
    store.add_constant(prefix + ".bx", {3 * hidden_dim}, T(0));
    store.add_normal(prefix + ".uzr", {hidden_dim, 2 * hidden_dim}, rng, stddev);
    store.add_normal(prefix + ".un", {hidden_dim, hidden_dim}, rng, stddev);
    return bind(store, prefix);
  }

  static GruParams bind(ad::ParameterStore<T>& store, const std::string& prefix) {
    GruParams g;
    g.wx = &store.get(prefix + ".wx");
    g.bx = &store.get(prefix + ".bx");
    g.uzr = &store.get(prefix + ".uzr");
    g.un = &store.get(prefix + ".un");
    g.input_dim = g.wx->value.rows();
    g.hidden_dim = g.un->value.rows();
    return g;
  }
};

/// Hidden state after every step, [length x H], from a zero initial state:
///   z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br)
///   c = tanh(x Wn + (r * h) Un + bn), h <- (1 - z) * h + z * c
template <typename T>
ad::Var<T> gru_states(ad::Var<T> inputs, const GruParams<T>& p) {
  ad::Tape<T>& tape = inputs.tape();
  if (inputs.cols() != p.input_dim) throw ShapeError("gru(inputs)", inputs.shape(), p.wx->value.shape());
  const std::size_t L = inputs.rows(), H = p.hidden_dim;
  auto xw = ad::matmul(inputs, tape.param(*p.wx)) + tape.param(*p.bx);
  auto uzr = tape.param(*p.uzr), un = tape.param(*p.un);
  std::vector<ad::Var<T>> states;
  states.reserve(L);
  ad::Var<T> h;
  for (std::size_t t = 0; t < L; ++t) {
    auto x = ad::slice_rows(xw, t, 1);
    ad::Var<T> z, r, cand;
    if (t == 0) {
      // h = 0: the recurrent terms vanish.
      z = ad::sigmoid(ad::slice_cols(x, 0, H));
      cand = ad::tanh(ad::slice_cols(x, 2 * H, H));
      h = z * cand;
    } else {
      auto hu = ad::matmul(h, uzr);
      z = ad::sigmoid(ad::slice_cols(x, 0, H) + ad::slice_cols(hu, 0, H));
      r = ad::sigmoid(ad::slice_cols(x, H, H) + ad::slice_cols(hu, H, H));
      cand = ad::tanh(ad::slice_cols(x, 2 * H, H) + ad::matmul(r * h, un));
      h = ad::one_minus(z) * h + z * cand;
    }
    states.push_back(h);
  }
  return L == 1 ? states.front() : ad::concat_rows(states);
}

/// Rows of `x` in reverse order.
template <typename T>
ad::Var<T> reverse_rows(ad::Var<T> x) {
  std::vector<std::int32_t> idx(x.rows());
  std::iota(idx.rbegin(), idx.rend(), 0);
  return ad::gather_rows(x, std::span<const std::int32_t>(idx));
}

/// Final GRU state [1 x H]; with `backward` set, also runs `backward` over
/// the reversed sequence and returns [1 x 2H] (forward state first).
template <typename T>
ad::Var<T> gru_forward(ad::Var<T> inputs, const GruParams<T>& forward, const GruParams<T>* backward = nullptr) {
  if (inputs.rows() == 0) throw ContractError("gru_forward: empty sequence");
  auto last = [](ad::Var<T> states) { return ad::slice_rows(states, states.rows() - 1, 1); };
  auto fw = last(gru_states(inputs, forward));
  if (!backward) return fw;
  auto bw = last(gru_states(reverse_rows(inputs), *backward));
  return ad::concat_cols<T>({fw, bw});
}

}  // namespace ehrbert::baselines
