// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ehrbert/core/error.hpp"

namespace ehrbert::eval {

/// AUC as an exact rational: numerator / denominator with
/// numerator = 2 * (#pos > neg pairs) + (#tied pairs), denominator = 2 * n_pos * n_neg.
struct AucCounts {
  std::uint64_t numerator = 0;
  std::uint64_t denominator = 0;
  friend bool operator==(const AucCounts&, const AucCounts&) = default;
};

/// Maps the rational to a double so that swapping the labels (which maps
/// numerator a to denominator - a) gives results summing to exactly 1.
inline double auc_from_counts(const AucCounts& c) {
  const double d = static_cast<double>(c.denominator);
  const std::uint64_t rest = c.denominator - c.numerator;
  if (c.numerator <= rest) return static_cast<double>(c.numerator) / d;
  return 1.0 - static_cast<double>(rest) / d;
}

/// Pair counts via one sort: within each group of tied scores, positives
/// beat every negative in lower groups and tie with the group's negatives.
/// `labels` is any indexable container of bool-convertible values.
template <typename Labels>
AucCounts auc_counts(std::span<const double> scores, const Labels& labels) {
  if (scores.size() != labels.size())
    throw ContractError("compute_auc: " + std::to_string(scores.size()) + " scores but " +
                        std::to_string(labels.size()) + " labels");
  std::uint64_t n_pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw ContractError("compute_auc: NaN score at index " + std::to_string(i));
    n_pos += static_cast<bool>(labels[i]) ? 1 : 0;
  }
  const std::uint64_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw DegenerateLabels("compute_auc: need both classes, got " + std::to_string(n_pos) + " positive and " +
                           std::to_string(n_neg) + " negative");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  AucCounts c;
  c.denominator = 2 * n_pos * n_neg;
  std::uint64_t neg_below = 0;
  for (std::size_t g = 0; g < order.size();) {
    std::size_t end = g;
    std::uint64_t pos = 0, neg = 0;
    while (end < order.size() && scores[order[end]] == scores[order[g]]) {
      (static_cast<bool>(labels[order[end]]) ? pos : neg) += 1;
      ++end;
    }
    c.numerator += 2 * pos * neg_below + pos * neg;
    neg_below += neg;
    g = end;
  }
  return c;
}

/// Probability that a random positive outranks a random negative, ties
/// counted half.
template <typename Labels>
double compute_auc(std::span<const double> scores, const Labels& labels) {
  return auc_from_counts(auc_counts(scores, labels));
}

}  // namespace ehrbert::eval
