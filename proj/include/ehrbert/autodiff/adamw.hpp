// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "ehrbert/autodiff/parameter_store.hpp"
#include "ehrbert/core/error.hpp"

namespace ehrbert::ad {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double max_grad_norm = 0.0;  // global-norm clipping; 0 disables

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("adamw: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("adamw: beta1 must be in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adamw: beta2 must be in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("adamw: eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("adamw: weight_decay must be >= 0");
    if (!(max_grad_norm >= 0.0)) throw ConfigError("adamw: max_grad_norm must be >= 0");
  }
};

/// L2 norm over every populated gradient in the store.
template <typename T>
double gradient_norm(const ParameterStore<T>& store) {
  double sq = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    if (!p.has_grad || !p.trainable) continue;
    for (T g : p.grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

/// One AdamW step over every trainable parameter holding a gradient:
///   p <- p - lr*wd*p                      (decoupled decay, decay-flagged only)
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// with bias-corrected moments. Gradients are cleared afterwards and the
/// store's step counter advances. Returns the pre-clipping gradient norm.
template <typename T>
double adamw_step(ParameterStore<T>& store, const AdamWConfig& cfg) {
  cfg.validate();
  bool any = false;
  for (std::size_t i = 0; i < store.size(); ++i) any = any || (store.at(i).has_grad && store.at(i).trainable);
  if (!any) throw ContractError("adamw_step: no parameter holds a gradient");
  const double norm = gradient_norm(store);
  if (!std::isfinite(norm)) throw NumericsError("adamw_step: non-finite gradient norm");
  const double clip = cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm ? cfg.max_grad_norm / norm : 1.0;

  ++store.step;
  const double t = static_cast<double>(store.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.eps);
  const T decay = static_cast<T>(1.0 - cfg.lr * cfg.weight_decay);
  const T c1 = static_cast<T>(1.0 / bc1), c2 = static_cast<T>(1.0 / bc2);
  const T cs = static_cast<T>(clip);

  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store.at(i);
    if (!p.has_grad || !p.trainable) {
      p.zero_grad();
      continue;
    }
    auto& w = p.value.values();
    for (std::size_t e = 0; e < w.size(); ++e) {
      const T g = p.grad[e] * cs;
      p.m[e] = b1 * p.m[e] + (T(1) - b1) * g;
      p.v[e] = b2 * p.v[e] + (T(1) - b2) * g * g;
      if (p.decay && cfg.weight_decay != 0.0) w[e] *= decay;
      const T m_hat = p.m[e] * c1;
      const T v_hat = p.v[e] * c2;
      w[e] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
    p.zero_grad();
  }
  return norm;
}

}  // namespace ehrbert::ad
