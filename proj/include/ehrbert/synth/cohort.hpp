// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "ehrbert/core/error.hpp"
#include "ehrbert/core/random.hpp"
#include "ehrbert/ehr/record.hpp"

namespace ehrbert::synth {

struct SynthConfig {
  std::size_t n_patients = 1000;
  std::size_t vocab_size = 500;
  double mean_visits = 8.0;
  double mean_codes_per_visit = 2.0;
  double outcome_prevalence = 0.3;
  double signal_strength = 2.0;  // log-odds per distinct risk code, up to risk_code_cap
  double prolonged_los_rate = 0.3;
  std::uint64_t seed = 1;

  // Latent structure shared by every cohort drawn with the same world_seed:
  // code popularity, topic membership and the risk-code set. Cohorts with a
  // different `seed` but equal world_seed come from the same population.
  std::uint64_t world_seed = 20200101;
  std::size_t n_topics = 10;
  double topic_affinity = 0.7;  // chance a code comes from the patient's topics
  double zipf_exponent = 1.0;
  int risk_code_cap = 4;
  double los_burden_slope = 1.5;  // log-odds of prolonged LOS per sd of code burden

  void validate() const {
    auto fail = [](const char* field, const char* why) {
      throw ConfigError(std::string("SynthConfig.") + field + ": " + why);
    };
    if (n_patients < 1) fail("n_patients", "must be >= 1");
    if (vocab_size < 10) fail("vocab_size", "must be >= 10");
    if (!(mean_visits >= 1.0) || !std::isfinite(mean_visits)) fail("mean_visits", "must be >= 1");
    if (!(mean_codes_per_visit >= 1.0) || !std::isfinite(mean_codes_per_visit))
      fail("mean_codes_per_visit", "must be >= 1");
    if (!(outcome_prevalence > 0.0 && outcome_prevalence < 1.0)) fail("outcome_prevalence", "must be in (0,1)");
    if (!(signal_strength >= 0.0) || !std::isfinite(signal_strength)) fail("signal_strength", "must be >= 0");
    if (!(prolonged_los_rate > 0.0 && prolonged_los_rate < 1.0)) fail("prolonged_los_rate", "must be in (0,1)");
    if (n_topics < 2 || n_topics > vocab_size / 2) fail("n_topics", "must be in [2, vocab_size/2]");
    if (!(topic_affinity >= 0.0 && topic_affinity <= 1.0)) fail("topic_affinity", "must be in [0,1]");
    if (!(zipf_exponent >= 0.0)) fail("zipf_exponent", "must be >= 0");
    if (risk_code_cap < 1) fail("risk_code_cap", "must be >= 1");
    if (!(los_burden_slope >= 0.0)) fail("los_burden_slope", "must be >= 0");
  }
};

inline std::string code_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "SYN%04zu", index);
  return buf;
}

/// The latent population a cohort is drawn from.
struct World {
  std::vector<double> popularity;           // Zipf weight per code
  std::vector<std::size_t> topic_of;        // topic per code
  std::vector<DiscreteSampler> topic_samplers;
  std::vector<std::vector<std::size_t>> topic_codes;
  DiscreteSampler background;

  bool is_risk_code(std::size_t code) const { return topic_of[code] == 0; }

  static World make(const SynthConfig& cfg) {
    World w;
    const std::size_t V = cfg.vocab_size;
    Rng rng(derive_seed(cfg.world_seed, {0x57041dULL}));
    std::vector<std::size_t> rank(V);
    std::iota(rank.begin(), rank.end(), 0);
    rng.shuffle(rank);
    w.popularity.resize(V);
    for (std::size_t c = 0; c < V; ++c)
      w.popularity[c] = 1.0 / std::pow(static_cast<double>(rank[c]) + 1.0, cfg.zipf_exponent);
    std::vector<std::size_t> order(V);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    w.topic_of.resize(V);
    w.topic_codes.assign(cfg.n_topics, {});
    for (std::size_t i = 0; i < V; ++i) {
      w.topic_of[order[i]] = i % cfg.n_topics;
    }
    for (std::size_t c = 0; c < V; ++c) w.topic_codes[w.topic_of[c]].push_back(c);
    for (const auto& codes : w.topic_codes) {
      std::vector<double> weights;
      for (std::size_t c : codes) weights.push_back(w.popularity[c]);
      w.topic_samplers.emplace_back(weights);
    }
    w.background = DiscreteSampler(w.popularity);
    return w;
  }
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Finds b such that mean_i sigmoid(b + x_i) == target.
inline double calibrate_intercept(const std::vector<double>& x, double target) {
  double lo = -50.0, hi = 50.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    double mean = 0.0;
    for (double v : x) mean += sigmoid(mid + v);
    mean /= static_cast<double>(x.size());
    (mean > target ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

enum : std::uint64_t { kCodeStream = 1, kLabelStream = 2 };

}  // namespace detail

/// Number of distinct risk codes in a patient (uncapped).
inline std::size_t count_risk_codes(const ehr::PatientRecord& p, const World& world) {
  std::set<std::size_t> seen;
  for (const auto& v : p.visits)
    for (const auto& c : v.codes) {
      const std::size_t idx = static_cast<std::size_t>(std::stoul(c.code.substr(3)));
      if (world.is_risk_code(idx)) seen.insert(idx);
    }
  return seen.size();
}

/// Draws n_patients records. Each patient belongs to one or two latent
/// topics; each code comes from a topic (Zipf within the topic) with
/// probability topic_affinity, else from the global Zipf law. Topic 0 codes
/// are the risk codes: outcome log-odds rise by signal_strength per distinct
/// risk code (capped). Prolonged-LOS odds rise with total code count.
/// Intercepts are calibrated on the drawn cohort so both label rates match
/// the configured values in expectation.
inline std::vector<ehr::PatientRecord> generate_cohort(const SynthConfig& cfg) {
  cfg.validate();
  const World world = World::make(cfg);
  std::vector<ehr::PatientRecord> cohort(cfg.n_patients);

  for (std::size_t i = 0; i < cfg.n_patients; ++i) {
    Rng rng(derive_seed(cfg.seed, {detail::kCodeStream, i}));
    ehr::PatientRecord& p = cohort[i];
    p.patient_id = "P" + std::to_string(i);
    std::size_t topics[2] = {rng.uniform_int(cfg.n_topics), 0};
    std::size_t n_topics = 1;
    if (rng.bernoulli(0.5)) {
      do {
        topics[1] = rng.uniform_int(cfg.n_topics);
      } while (topics[1] == topics[0]);
      n_topics = 2;
    }
    const std::size_t n_visits = 1 + rng.poisson(cfg.mean_visits - 1.0);
    for (std::size_t v = 0; v < n_visits; ++v) {
      ehr::Visit visit;
      visit.visit_index = static_cast<int>(v) + 1;
      const std::size_t n_codes = 1 + rng.poisson(cfg.mean_codes_per_visit - 1.0);
      for (std::size_t c = 0; c < n_codes; ++c) {
        std::size_t code;
        if (rng.bernoulli(cfg.topic_affinity)) {
          const std::size_t t = topics[rng.uniform_int(n_topics)];
          code = world.topic_codes[t][world.topic_samplers[t](rng)];
        } else {
          code = world.background(rng);
        }
        ehr::DiagnosisCode dc;
        dc.code = code_name(code);
        dc.present_on_admission = rng.bernoulli(0.4);
        dc.captured_during_visit = rng.bernoulli(0.7);
        dc.priority = static_cast<int>(rng.uniform_int(10));
        visit.codes.push_back(std::move(dc));
      }
      p.visits.push_back(std::move(visit));
    }
    // Selection rule: at least three codes per patient.
    while (p.total_codes() < 3) {
      ehr::DiagnosisCode dc;
      dc.code = code_name(world.background(rng));
      dc.priority = static_cast<int>(rng.uniform_int(10));
      p.visits.back().codes.push_back(std::move(dc));
    }
  }

  // Outcome and LOS labels.
  std::vector<double> outcome_x(cfg.n_patients), los_x(cfg.n_patients);
  double mean_burden = 0.0, sq = 0.0;
  for (const auto& p : cohort) {
    const double n = static_cast<double>(p.total_codes());
    mean_burden += n;
    sq += n * n;
  }
  mean_burden /= static_cast<double>(cfg.n_patients);
  const double var = std::max(sq / static_cast<double>(cfg.n_patients) - mean_burden * mean_burden, 1e-12);
  const double sd = std::sqrt(var);
  for (std::size_t i = 0; i < cfg.n_patients; ++i) {
    const auto k = std::min<std::size_t>(count_risk_codes(cohort[i], world), static_cast<std::size_t>(cfg.risk_code_cap));
    outcome_x[i] = cfg.signal_strength * static_cast<double>(k);
    los_x[i] = cfg.los_burden_slope * (static_cast<double>(cohort[i].total_codes()) - mean_burden) / sd;
  }
  const double outcome_b = detail::calibrate_intercept(outcome_x, cfg.outcome_prevalence);
  const double los_b = detail::calibrate_intercept(los_x, cfg.prolonged_los_rate);

  for (std::size_t i = 0; i < cfg.n_patients; ++i) {
    Rng rng(derive_seed(cfg.seed, {detail::kLabelStream, i}));
    ehr::PatientRecord& p = cohort[i];
    p.outcome_label = rng.uniform() < detail::sigmoid(outcome_b + outcome_x[i]);
    const bool prolonged = rng.uniform() < detail::sigmoid(los_b + los_x[i]);
    for (auto& v : p.visits) v.los_days = static_cast<int>(rng.uniform_int(ehr::kProlongedStayDays + 1));
    if (prolonged) {
      // The longest visit (most codes) is the prolonged stay.
      std::size_t longest = 0;
      for (std::size_t v = 1; v < p.visits.size(); ++v)
        if (p.visits[v].codes.size() > p.visits[longest].codes.size()) longest = v;
      p.visits[longest].los_days = ehr::kProlongedStayDays + 1 + static_cast<int>(rng.uniform_int(23));
    }
    p.prolonged_los_label = ehr::derive_prolonged_los_label(p);
  }
  return cohort;
}

struct CohortSplit {
  std::vector<ehr::PatientRecord> train, valid, test;
};

struct SplitRatios {
  double train = 0.7, valid = 0.1, test = 0.2;
};

/// Seeded shuffle, then floor allocation for valid and test; the
/// remainder goes to train.
template <typename Item>
void split_items(const std::vector<Item>& items, SplitRatios ratios, std::uint64_t seed, std::vector<Item>& train,
                 std::vector<Item>& valid, std::vector<Item>& test) {
  if (!(ratios.train > 0 && ratios.valid > 0 && ratios.test > 0) ||
      std::abs(ratios.train + ratios.valid + ratios.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must be positive and sum to 1");
  if (items.size() < 3) throw TooSmall("split_cohort: need at least 3 patients");
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, {0x5b1170ULL}));
  rng.shuffle(idx);
  const double n = static_cast<double>(items.size());
  // Small epsilon so that e.g. 0.1 * 10 floors to 1, not 0.
  const auto n_valid = static_cast<std::size_t>(std::floor(ratios.valid * n + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(ratios.test * n + 1e-9));
  const std::size_t n_train = items.size() - n_valid - n_test;
  train.clear();
  valid.clear();
  test.clear();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Item& it = items[idx[i]];
    if (i < n_train)
      train.push_back(it);
    else if (i < n_train + n_valid)
      valid.push_back(it);
    else
      test.push_back(it);
  }
}

inline CohortSplit split_cohort(const std::vector<ehr::PatientRecord>& cohort, SplitRatios ratios, std::uint64_t seed) {
  CohortSplit s;
  split_items(cohort, ratios, seed, s.train, s.valid, s.test);
  return s;
}

/// Uniform sample without replacement of `size` items that contains at
/// least one positive and one negative label (per `label_of`).
template <typename Item, typename LabelFn>
std::vector<Item> subsample_items(const std::vector<Item>& train, std::size_t size, std::uint64_t replicate_seed,
                                  LabelFn label_of) {
  if (size < 1 || size > train.size())
    throw RangeError("subsample_training: size " + std::to_string(size) + " not in [1, " +
                     std::to_string(train.size()) + "]");
  for (int attempt = 0; attempt < 100; ++attempt) {
    Rng rng(derive_seed(replicate_seed, {0x5a3b1eULL, static_cast<std::uint64_t>(attempt)}));
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates over the first `size` slots.
    for (std::size_t i = 0; i < size; ++i) {
      const std::size_t j = i + rng.uniform_int(train.size() - i);
      std::swap(idx[i], idx[j]);
    }
    std::vector<Item> out;
    out.reserve(size);
    bool pos = false, neg = false;
    for (std::size_t i = 0; i < size; ++i) {
      out.push_back(train[idx[i]]);
      (label_of(out.back()) ? pos : neg) = true;
    }
    if (pos && neg) return out;
  }
  throw DegenerateSample("subsample_training: no sample with both labels after 100 tries");
}

inline std::vector<ehr::PatientRecord> subsample_training(const std::vector<ehr::PatientRecord>& train,
                                                          std::size_t size, std::uint64_t replicate_seed) {
  return subsample_items(train, size, replicate_seed,
                         [](const ehr::PatientRecord& p) { return p.outcome_label.value_or(false); });
}

}  // namespace ehrbert::synth
