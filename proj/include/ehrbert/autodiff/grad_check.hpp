// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ehrbert/autodiff/ops.hpp"
#include "ehrbert/autodiff/parameter_store.hpp"
#include "ehrbert/autodiff/tape.hpp"

namespace ehrbert::ad {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;  // central-difference h
  // Denominator floor of the relative error: |a - n| / max(|a|, |n|, floor).
  // Entries whose gradients are both below the floor are compared on an
  // absolute scale instead of amplifying round-off.
  double floor = 1e-3;
  std::size_t max_entries_per_param = 0;  // 0 checks every entry
};

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Builds a scalar loss on the given tape from parameters in the store.
template <typename T>
using LossClosure = std::function<Var<T>(Tape<T>&)>;

/// Compares backward() gradients with central finite differences for every
/// trainable parameter. The closure must be deterministic; two forward
/// passes that disagree raise ContractError.
template <typename T>
GradCheckReport grad_check(const LossClosure<T>& closure, ParameterStore<T>& store,
                           const GradCheckOptions& opt = {}) {
  auto eval = [&]() {
    Tape<T> tape;
    return static_cast<double>(closure(tape).item());
  };
  const double f0 = eval();
  const double f1 = eval();
  if (f0 != f1) throw ContractError("grad_check: closure is not deterministic (dropout enabled?)");

  store.zero_grad();
  {
    Tape<T> tape;
    Var<T> loss = closure(tape);
    backward(tape, loss);
  }

  GradCheckReport report;
  report.tolerance = opt.tolerance;
  for (std::size_t pi = 0; pi < store.size(); ++pi) {
    auto& p = store.at(pi);
    if (!p.trainable) continue;
    ParamCheck pc;
    pc.name = p.name;
    const std::size_t n = p.value.size();
    const std::size_t stride =
        opt.max_entries_per_param == 0 || n <= opt.max_entries_per_param ? 1 : n / opt.max_entries_per_param;
    for (std::size_t e = 0; e < n; e += stride) {
      const T orig = p.value[e];
      p.value[e] = orig + static_cast<T>(opt.step);
      const double fp = eval();
      p.value[e] = orig - static_cast<T>(opt.step);
      const double fm = eval();
      p.value[e] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double analytic = p.has_grad ? static_cast<double>(p.grad[e]) : 0.0;
      const double abs_err = std::abs(analytic - numeric);
      const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      pc.max_rel_error = std::max(pc.max_rel_error, rel);
      pc.max_abs_error = std::max(pc.max_abs_error, abs_err);
      ++pc.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.params.push_back(pc);
  }
  store.zero_grad();
  report.passed = report.max_rel_error < opt.tolerance;
  return report;
}

}  // namespace ehrbert::ad
