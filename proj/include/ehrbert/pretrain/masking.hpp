// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "ehrbert/core/error.hpp"
#include "ehrbert/core/random.hpp"
#include "ehrbert/ehr/encode.hpp"
#include "ehrbert/ehr/vocabulary.hpp"

namespace ehrbert::pretrain {

enum class MaskBranch { mask, random, unchanged };

/// One patient with a single position hidden for the masked-LM task.
struct MaskedExample {
  ehr::ModelInput input;
  std::size_t masked_position = 0;
  std::int32_t original_code_id = 0;
  bool los_label = false;
  MaskBranch branch = MaskBranch::mask;
};

inline constexpr double kMaskTokenRate = 0.8;
inline constexpr double kRandomTokenRate = 0.1;

/// Picks one real position uniformly, then replaces its code by [MASK]
/// (80%), by a uniformly drawn non-reserved code (10%), or leaves it (10%).
inline MaskedExample apply_masking(const ehr::ModelInput& input, std::size_t vocab_size, Rng& rng) {
  if (input.length == 0) throw ContractError("apply_masking: input has no real positions");
  if (vocab_size <= static_cast<std::size_t>(ehr::kNumReserved)) throw ContractError("apply_masking: vocabulary has no ordinary codes");
  MaskedExample ex;
  ex.input = input;
  ex.los_label = input.prolonged_los_label;
  ex.masked_position = static_cast<std::size_t>(rng.uniform_int(input.length));
  ex.original_code_id = input.code_ids[ex.masked_position];
  const double u = rng.uniform();
  std::int32_t& slot = ex.input.code_ids[ex.masked_position];
  if (u < kMaskTokenRate) {
    ex.branch = MaskBranch::mask;
    slot = ehr::kMaskId;
  } else if (u < kMaskTokenRate + kRandomTokenRate) {
    ex.branch = MaskBranch::random;
    slot = static_cast<std::int32_t>(ehr::kNumReserved + rng.uniform_int(vocab_size - ehr::kNumReserved));
  } else {
    ex.branch = MaskBranch::unchanged;
  }
  return ex;
}

}  // namespace ehrbert::pretrain
