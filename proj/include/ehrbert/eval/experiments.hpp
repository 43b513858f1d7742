// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrbert/core/format.hpp"
#include "ehrbert/eval/finetune.hpp"
#include "ehrbert/synth/cohort.hpp"

namespace ehrbert::eval {

/// One (size, condition) cell: replicate AUCs and their summary.
struct ConditionResult {
  std::size_t size = 0;
  std::string condition;
  std::vector<double> aucs;
  double mean = 0;
  /// Sample standard deviation (n - 1); 0 for a single replicate.
  double std = 0;
  /// Sum of the replicates' training wall-clock times.
  double wall_seconds = 0;

  void summarize() {
    const auto n = static_cast<double>(aucs.size());
    mean = 0;
    for (double a : aucs) mean += a;
    mean = aucs.empty() ? 0.0 : mean / n;
    double ss = 0;
    for (double a : aucs) ss += (a - mean) * (a - mean);
    std = aucs.size() < 2 ? 0.0 : std::sqrt(ss / (n - 1));
  }

  friend bool operator==(const ConditionResult&, const ConditionResult&) = default;
};

/// Aggregate CSV: size,condition,mean,std,n,wall_seconds.
/// Long CSV (plot-ready): size,condition,replicate,auc.
struct ExperimentReport {
  std::string experiment;
  std::vector<ConditionResult> rows;

  const ConditionResult& at(std::size_t size, const std::string& condition) const {
    for (const auto& r : rows)
      if (r.size == size && r.condition == condition) return r;
    throw RangeError("report has no row for size " + std::to_string(size) + ", condition '" + condition + "'");
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "size,condition,mean,std,n,wall_seconds\n";
    for (const auto& r : rows)
      os << r.size << ',' << r.condition << ',' << format_double(r.mean) << ',' << format_double(r.std) << ','
         << r.aucs.size() << ',' << format_double(r.wall_seconds) << '\n';
    return os.str();
  }

  std::string to_long_csv() const {
    std::ostringstream os;
    os << "size,condition,replicate,auc\n";
    for (const auto& r : rows)
      for (std::size_t i = 0; i < r.aucs.size(); ++i)
        os << r.size << ',' << r.condition << ',' << i << ',' << format_double(r.aucs[i]) << '\n';
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : rows)
      rs.push_back({{"size", r.size},
                    {"condition", r.condition},
                    {"mean", r.mean},
                    {"std", r.std},
                    {"n", r.aucs.size()},
                    {"wall_seconds", r.wall_seconds},
                    {"aucs", r.aucs}});
    return {{"experiment", experiment}, {"rows", rs}};
  }

  static ExperimentReport from_json(const nlohmann::json& j) {
    try {
      ExperimentReport rep;
      rep.experiment = j.at("experiment").get<std::string>();
      for (const auto& r : j.at("rows")) {
        ConditionResult c;
        c.size = r.at("size").get<std::size_t>();
        c.condition = r.at("condition").get<std::string>();
        c.mean = r.at("mean").get<double>();
        c.std = r.at("std").get<double>();
        c.wall_seconds = r.at("wall_seconds").get<double>();
        c.aucs = r.at("aucs").get<std::vector<double>>();
        if (r.at("n").get<std::size_t>() != c.aucs.size()) throw ConfigError("report row n differs from aucs");
        rep.rows.push_back(std::move(c));
      }
      return rep;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed experiment report: ") + e.what());
    }
  }

  /// Rebuilds a report from its aggregate and long CSV files.
  static ExperimentReport from_csv(const std::string& experiment, const std::string& aggregate,
                                   const std::string& long_form) {
    ExperimentReport rep;
    rep.experiment = experiment;
    auto lines = [](const std::string& text, const char* header) {
      std::vector<std::vector<std::string>> out;
      std::istringstream is(text);
      std::string line;
      if (!std::getline(is, line) || line != header) throw ConfigError(std::string("expected CSV header ") + header);
      while (std::getline(is, line))
        if (!line.empty()) out.push_back(split_csv_line(line));
      return out;
    };
    std::vector<std::size_t> counts;
    for (const auto& f : lines(aggregate, "size,condition,mean,std,n,wall_seconds")) {
      if (f.size() != 6) throw ConfigError("aggregate CSV row needs 6 fields");
      ConditionResult c;
      c.size = std::stoul(f[0]);
      c.condition = f[1];
      c.mean = parse_double(f[2]);
      c.std = parse_double(f[3]);
      counts.push_back(std::stoul(f[4]));
      c.wall_seconds = parse_double(f[5]);
      rep.rows.push_back(std::move(c));
    }
    for (const auto& f : lines(long_form, "size,condition,replicate,auc")) {
      if (f.size() != 4) throw ConfigError("long CSV row needs 4 fields");
      auto& row = const_cast<ConditionResult&>(rep.at(std::stoul(f[0]), f[1]));
      if (std::stoul(f[2]) != row.aucs.size()) throw ConfigError("long CSV replicates out of order");
      row.aucs.push_back(parse_double(f[3]));
    }
    for (std::size_t i = 0; i < rep.rows.size(); ++i)
      if (rep.rows[i].aucs.size() != counts[i]) throw ConfigError("aggregate n differs from long CSV replicates");
    return rep;
  }

  friend bool operator==(const ExperimentReport&, const ExperimentReport&) = default;
};

struct ExperimentConfig {
  std::vector<baselines::ModelSpec> conditions = baselines::ex1_conditions();
  std::size_t replicates = 10;
  /// Template for every run; `spec`, `seed` and `jobs` are set per run.
  FinetuneConfig finetune;
  double sweep_valid_fraction = 0.25;
  std::uint64_t seed = 1;
  /// Runs trained concurrently.
  std::size_t jobs = 1;

  void validate() const {
    if (conditions.empty()) throw ConfigError("ExperimentConfig.conditions is empty");
    if (replicates == 0) throw ConfigError("ExperimentConfig.replicates must be positive");
    if (!(sweep_valid_fraction > 0.0 && sweep_valid_fraction < 1.0))
      throw ConfigError("ExperimentConfig.sweep_valid_fraction must be in (0,1)");
    for (const auto& c : conditions) c.validate();
  }
};

/// Splits `items` into train/valid with `fraction` of each label class in
/// valid (rounded, at least one), shuffled by `seed`.
inline void stratified_holdout(const std::vector<ehr::ModelInput>& items, double fraction, std::uint64_t seed,
                               std::vector<ehr::ModelInput>& train, std::vector<ehr::ModelInput>& valid) {
  std::vector<std::size_t> by_label[2];
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!items[i].outcome_label) throw ContractError("stratified_holdout: patient without outcome label");
    by_label[*items[i].outcome_label ? 1 : 0].push_back(i);
  }
  if (by_label[0].size() < 2 || by_label[1].size() < 2)
    throw DegenerateSample("stratified_holdout: need two patients of each label");
  Rng rng(derive_seed(seed, {0x737472ULL}));
  std::vector<bool> is_valid(items.size(), false);
  for (auto& idx : by_label) {
    rng.shuffle(idx);
    auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    k = std::clamp<std::size_t>(k, 1, idx.size() - 1);
    for (std::size_t i = 0; i < k; ++i) is_valid[idx[i]] = true;
  }
  train.clear();
  valid.clear();
  for (std::size_t i = 0; i < items.size(); ++i) (is_valid[i] ? valid : train).push_back(items[i]);
}

namespace detail {

enum : std::uint64_t { kEx1Stream = 0x657831, kSweepStream = 0x737765 };

inline void check_artifacts(const std::vector<baselines::ModelSpec>& conditions, bool have_bert, bool have_sg) {
  for (const auto& c : conditions) {
    if (c.needs_med_bert() && !have_bert) throw ConfigError(c.label() + " needs a pretrained Med-BERT checkpoint");
    if (c.needs_skipgram() && !have_sg) throw ConfigError(c.label() + " needs skip-gram embeddings");
  }
}

struct Run {
  std::size_t row, replicate;
  double auc = 0, seconds = 0;
};

template <typename T, typename Job>
ExperimentReport run_grid(const std::string& name, const std::vector<std::size_t>& sizes,
                          const ExperimentConfig& config, Job job) {
  ExperimentReport rep;
  rep.experiment = name;
  std::vector<Run> runs;
  for (std::size_t s = 0; s < sizes.size(); ++s)
    for (std::size_t c = 0; c < config.conditions.size(); ++c) {
      ConditionResult row;
      row.size = sizes[s];
      row.condition = config.conditions[c].label();
      row.aucs.assign(config.replicates, 0.0);
      for (std::size_t r = 0; r < config.replicates; ++r) runs.push_back({rep.rows.size(), r});
      rep.rows.push_back(std::move(row));
    }
  const std::size_t per_size = config.conditions.size();
  parallel_for(runs.size(), config.jobs, [&](std::size_t i) {
    Run& run = runs[i];
    const auto start = std::chrono::steady_clock::now();
    run.auc = job(run.row / per_size, config.conditions[run.row % per_size], run.replicate);
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  });
  for (const auto& run : runs) {
    rep.rows[run.row].aucs[run.replicate] = run.auc;
    rep.rows[run.row].wall_seconds += run.seconds;
  }
  for (auto& row : rep.rows) row.summarize();
  return rep;
}

}  // namespace detail

/// Every condition trained on the full training split, replicates differing
/// only in initialization (and dropout/shuffle streams). Replicate r uses the
/// same seed for every condition.
template <typename T>
ExperimentReport run_ex1(const std::vector<ehr::ModelInput>& train, const std::vector<ehr::ModelInput>& valid,
                         const std::vector<ehr::ModelInput>& test, const ExperimentConfig& config,
                         const baselines::Artifacts<T>& artifacts, std::size_t vocab_size) {
  config.validate();
  detail::check_artifacts(config.conditions, artifacts.med_bert != nullptr, artifacts.skipgram != nullptr);
  return detail::run_grid<T>("ex1", {train.size()}, config,
                             [&](std::size_t, const baselines::ModelSpec& spec, std::size_t r) {
                               FinetuneConfig fc = config.finetune;
                               fc.spec = spec;
                               fc.seed = derive_seed(config.seed, {detail::kEx1Stream, r});
                               fc.jobs = 1;
                               return run_finetune<T>(train, valid, test, fc, artifacts, vocab_size).test_auc;
                             });
}

/// Training subsample of `size` for replicate `r`, split into train/valid
/// (stratified, `valid_fraction` of the subsample). Shared by all conditions.
inline void sweep_sample(const std::vector<ehr::ModelInput>& pool, std::size_t size, std::size_t r,
                         const ExperimentConfig& config, std::vector<ehr::ModelInput>& train,
                         std::vector<ehr::ModelInput>& valid) {
  const std::uint64_t s = derive_seed(config.seed, {detail::kSweepStream, size, r});
  const auto sample = synth::subsample_items(pool, size, s, [](const ehr::ModelInput& in) {
    return in.outcome_label.value_or(false);
  });
  stratified_holdout(sample, config.sweep_valid_fraction, s, train, valid);
}

/// Sample-efficiency sweep: for each size, `replicates` bootstrap subsamples
/// of the training pool; each condition trains on the same subsamples.
template <typename T>
ExperimentReport run_size_sweep(const std::vector<ehr::ModelInput>& pool, const std::vector<ehr::ModelInput>& test,
                                const std::vector<std::size_t>& sizes, const ExperimentConfig& config,
                                const baselines::Artifacts<T>& artifacts, std::size_t vocab_size) {
  config.validate();
  if (sizes.empty()) throw ConfigError("run_size_sweep: no sizes given");
  for (std::size_t s : sizes)
    if (s < 8 || s > pool.size())
      throw RangeError("run_size_sweep: size " + std::to_string(s) + " not in [8, " + std::to_string(pool.size()) +
                       "]");
  detail::check_artifacts(config.conditions, artifacts.med_bert != nullptr, artifacts.skipgram != nullptr);
  return detail::run_grid<T>("sweep", sizes, config,
                             [&](std::size_t s, const baselines::ModelSpec& spec, std::size_t r) {
                               std::vector<ehr::ModelInput> train, valid;
                               sweep_sample(pool, sizes[s], r, config, train, valid);
                               FinetuneConfig fc = config.finetune;
                               fc.spec = spec;
                               fc.seed = derive_seed(config.seed, {detail::kSweepStream, sizes[s], r, 1});
                               fc.jobs = 1;
                               return run_finetune<T>(train, valid, test, fc, artifacts, vocab_size).test_auc;
                             });
}

}  // namespace ehrbert::eval
