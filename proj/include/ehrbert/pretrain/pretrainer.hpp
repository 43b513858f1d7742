// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrbert/autodiff/adamw.hpp"
#include "ehrbert/core/format.hpp"
#include "ehrbert/core/parallel.hpp"
#include "ehrbert/ehr/jsonl.hpp"
#include "ehrbert/eval/auc.hpp"
#include "ehrbert/model/med_bert.hpp"
#include "ehrbert/pretrain/masking.hpp"

namespace ehrbert::pretrain {

struct PretrainConfig {
  std::size_t batch_size = 32;
  std::size_t total_steps = 1000;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;
  std::size_t warmup_steps = 0;
  double los_loss_weight = 1.0;
  /// When false the Prolonged-LOS head is left out of the graph entirely.
  bool los_task = true;
  std::uint64_t seed = 1;
  std::size_t eval_every = 100;
  /// 0 disables intermediate checkpoints.
  std::size_t checkpoint_every = 0;
  /// Fraction of the cohort held out for the validation LOS AUC.
  double valid_fraction = 0.1;
  std::size_t jobs = 1;

  void validate() const {
    if (batch_size == 0) throw ConfigError("PretrainConfig.batch_size must be positive");
    if (total_steps == 0) throw ConfigError("PretrainConfig.total_steps must be positive");
    if (!(lr > 0.0)) throw ConfigError("PretrainConfig.lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("PretrainConfig.weight_decay must be >= 0");
    if (!(max_grad_norm >= 0.0)) throw ConfigError("PretrainConfig.max_grad_norm must be >= 0");
    if (!(los_loss_weight >= 0.0)) throw ConfigError("PretrainConfig.los_loss_weight must be >= 0");
    if (eval_every == 0) throw ConfigError("PretrainConfig.eval_every must be positive");
    if (!(valid_fraction >= 0.0 && valid_fraction < 1.0))
      throw ConfigError("PretrainConfig.valid_fraction must be in [0,1)");
  }

  ad::AdamWConfig optimizer(std::size_t step) const {
    ad::AdamWConfig c;
    c.lr = lr;
    if (warmup_steps > 0 && step < warmup_steps)
      c.lr = lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    c.weight_decay = weight_decay;
    c.max_grad_norm = max_grad_norm;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},   {"total_steps", c.total_steps},
                     {"lr", c.lr},                   {"weight_decay", c.weight_decay},
                     {"max_grad_norm", c.max_grad_norm}, {"warmup_steps", c.warmup_steps},
                     {"los_loss_weight", c.los_loss_weight}, {"los_task", c.los_task},
                     {"seed", c.seed},               {"eval_every", c.eval_every},
                     {"checkpoint_every", c.checkpoint_every}, {"valid_fraction", c.valid_fraction}};
}

// Stream ids for derive_seed.
inline constexpr std::uint64_t kBatchStream = 11;
inline constexpr std::uint64_t kMaskStream = 12;
inline constexpr std::uint64_t kDropoutStream = 13;
inline constexpr std::uint64_t kHoldoutStream = 14;

/// Patient order for pretraining. Step s (1-based) takes global positions
/// (s-1)*B .. s*B-1 of an endless sequence of per-epoch permutations, so a
/// batch depends only on (seed, step) and a resumed run sees the same data.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n_patients, std::size_t batch_size, std::uint64_t seed)
      : n_(n_patients), batch_(batch_size), seed_(seed) {
    if (n_ == 0) throw EmptyCohort("BatchSchedule: no training patients");
  }

  std::vector<std::size_t> indices(std::size_t step) {
    if (step == 0) throw ContractError("BatchSchedule: steps are 1-based");
    std::vector<std::size_t> out(batch_);
    for (std::size_t i = 0; i < batch_; ++i) {
      const std::size_t p = (step - 1) * batch_ + i;
      out[i] = permutation(p / n_)[p % n_];
    }
    return out;
  }

 private:
  const std::vector<std::size_t>& permutation(std::size_t epoch) {
    if (epoch != cached_epoch_ || perm_.empty()) {
      perm_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
      Rng rng(derive_seed(seed_, {kBatchStream, epoch}));
      rng.shuffle(perm_);
      cached_epoch_ = epoch;
    }
    return perm_;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::size_t cached_epoch_ = 0;
  std::vector<std::size_t> perm_;
};

/// Masked batch for a step; masking draws come from (seed, step, slot).
inline std::vector<MaskedExample> make_batch(const std::vector<ehr::ModelInput>& train, BatchSchedule& schedule,
                                             std::size_t vocab_size, std::uint64_t seed, std::size_t step) {
  const auto idx = schedule.indices(step);
  std::vector<MaskedExample> batch;
  batch.reserve(idx.size());
  for (std::size_t slot = 0; slot < idx.size(); ++slot) {
    Rng rng(derive_seed(seed, {kMaskStream, step, slot}));
    batch.push_back(apply_masking(train[idx[slot]], vocab_size, rng));
  }
  return batch;
}

struct StepResult {
  double mlm_loss = 0;
  double los_loss = 0;
  double grad_norm = 0;
};

/// One optimizer step on the joint loss
///   mean(masked-LM cross-entropy) + los_loss_weight * mean(LOS BCE).
/// Each example is differentiated on its own tape (optionally in parallel)
/// and the gradients are folded into the store in slot order, so the
/// result does not depend on `jobs`.
template <typename T>
StepResult pretrain_step(model::MedBert<T>& model, const std::vector<MaskedExample>& batch,
                         const PretrainConfig& config, std::size_t step) {
  if (batch.empty()) throw ContractError("pretrain_step: empty batch");
  const std::size_t B = batch.size();
  std::vector<std::unique_ptr<ad::Tape<T>>> tapes(B);
  std::vector<double> mlm(B), los(B);
  const T seed_grad = T(1) / static_cast<T>(B);
  try {
    parallel_for(B, config.jobs, [&](std::size_t i) {
      const MaskedExample& ex = batch[i];
      tapes[i] = std::make_unique<ad::Tape<T>>();
      ad::Tape<T>& tape = *tapes[i];
      Rng rng(derive_seed(config.seed, {kDropoutStream, step, i}));
      auto out = model.forward(tape, ex.input, true, &rng);
      const std::size_t pos[] = {ex.masked_position};
      const std::int32_t target[] = {ex.original_code_id};
      auto loss = ad::cross_entropy_logits(model.mlm_logits(tape, out.hidden, pos), std::span<const std::int32_t>(target));
      mlm[i] = static_cast<double>(loss.item());
      if (config.los_task) {
        auto l = ad::binary_cross_entropy_logit(model.pooled_logit(tape, out.hidden, ex.input.length, model::kLosHead),
                                                ex.los_label);
        los[i] = static_cast<double>(l.item());
        loss = loss + ad::affine(l, static_cast<T>(config.los_loss_weight));
      }
      tape.backward(loss, seed_grad);
    });
    for (auto& t : tapes) t->accumulate_parameter_grads();
    tapes.clear();
    StepResult r;
    for (std::size_t i = 0; i < B; ++i) {
      r.mlm_loss += mlm[i];
      r.los_loss += los[i];
    }
    r.mlm_loss /= static_cast<double>(B);
    r.los_loss /= static_cast<double>(B);
    if (!std::isfinite(r.mlm_loss) || !std::isfinite(r.los_loss)) throw NumericsError("non-finite loss");
    r.grad_norm = ad::adamw_step(model.store(), config.optimizer(step));
    return r;
  } catch (const NumericsError& e) {
    model.store().zero_grad();
    throw NumericsError("pretrain step " + std::to_string(step) + ": " + e.what());
  }
}

/// Sigmoid of a pooled head's logit for every input, eval mode.
template <typename T>
std::vector<double> pooled_probabilities(const model::MedBert<T>& model, const std::vector<ehr::ModelInput>& inputs,
                                         const std::string& head, std::size_t jobs = 1) {
  std::vector<double> out(inputs.size());
  parallel_for(inputs.size(), jobs, [&](std::size_t i) {
    ad::Tape<T> tape;
    auto h = model.forward(tape, inputs[i], false, nullptr).hidden;
    const double z = static_cast<double>(model.pooled_logit(tape, h, inputs[i].length, head).item());
    out[i] = 1.0 / (1.0 + std::exp(-z));
  });
  return out;
}

/// AUC of the LOS head on `inputs`; NaN when the labels are one-class.
template <typename T>
double los_auc(const model::MedBert<T>& model, const std::vector<ehr::ModelInput>& inputs, std::size_t jobs = 1) {
  if (inputs.empty()) return std::nan("");
  std::vector<bool> labels;
  for (const auto& in : inputs) labels.push_back(in.prolonged_los_label);
  if (std::count(labels.begin(), labels.end(), true) == 0 || std::count(labels.begin(), labels.end(), false) == 0)
    return std::nan("");
  const auto probs = pooled_probabilities(model, inputs, model::kLosHead, jobs);
  return eval::compute_auc(probs, labels);
}

struct MlmEvaluation {
  double mean_loss = 0;
  double accuracy = 0;
  std::size_t n_masks = 0;
};

/// Masks every real position of every input in turn with [MASK] and scores
/// the prediction of the original code (eval mode).
template <typename T>
MlmEvaluation evaluate_mlm(const model::MedBert<T>& model, const std::vector<ehr::ModelInput>& inputs,
                           std::size_t jobs = 1) {
  std::vector<double> loss(inputs.size());
  std::vector<std::size_t> hits(inputs.size()), counts(inputs.size());
  parallel_for(inputs.size(), jobs, [&](std::size_t i) {
    for (std::size_t pos = 0; pos < inputs[i].length; ++pos) {
      ehr::ModelInput in = inputs[i];
      const std::int32_t target = in.code_ids[pos];
      in.code_ids[pos] = ehr::kMaskId;
      ad::Tape<T> tape;
      auto h = model.forward(tape, in, false, nullptr).hidden;
      const std::size_t p[] = {pos};
      auto logits = model.mlm_logits(tape, h, p);
      loss[i] += static_cast<double>(
          ad::cross_entropy_logits(logits, std::span<const std::int32_t>(&target, 1)).item());
      const auto& v = logits.value().values();
      hits[i] += static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin()) ==
                 static_cast<std::size_t>(target);
      ++counts[i];
    }
  });
  MlmEvaluation r;
  double total = 0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    total += loss[i];
    hit += hits[i];
    r.n_masks += counts[i];
  }
  if (r.n_masks == 0) throw EmptyCohort("evaluate_mlm: no positions to score");
  r.mean_loss = total / static_cast<double>(r.n_masks);
  r.accuracy = static_cast<double>(hit) / static_cast<double>(r.n_masks);
  return r;
}

struct StepLog {
  std::size_t step = 0;
  double mlm_loss = 0;
  double los_loss = 0;
  friend bool operator==(const StepLog&, const StepLog&) = default;
};

/// One row of the loss curve: the batch losses of that step plus the LOS
/// AUC on the held-out patients after the update.
struct CurveRow {
  std::size_t step = 0;
  double mlm_loss = 0;
  double los_loss = 0;
  double los_auc_on_valid = std::nan("");
};

struct PretrainReport {
  std::vector<StepLog> steps;
  std::vector<CurveRow> curve;
  std::vector<std::string> checkpoints;
  double final_mlm_loss = 0;
  double final_los_loss = 0;
};

inline std::string curve_csv_header() { return "step,mlm_loss,los_loss,los_auc_on_valid\n"; }

inline std::string curve_csv_row(const CurveRow& r) {
  return std::to_string(r.step) + "," + format_double(r.mlm_loss) + "," + format_double(r.los_loss) + "," +
         format_double(r.los_auc_on_valid) + "\n";
}

inline std::vector<CurveRow> parse_curve_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<CurveRow> rows;
  if (!std::getline(is, line) || line + "\n" != curve_csv_header()) throw IoError("loss curve: bad header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw IoError("loss curve: bad row '" + line + "'");
    rows.push_back({std::stoul(f[0]), parse_double(f[1]), parse_double(f[2]), parse_double(f[3])});
  }
  return rows;
}

/// Where pretrain() writes artifacts. Empty directory disables file output.
struct PretrainOutput {
  std::string dir;
  std::string checkpoint_name(std::size_t step) const { return dir + "/checkpoint_step_" + std::to_string(step) + ".ckpt"; }
  std::string curve_path() const { return dir + "/loss_curve.csv"; }
  std::string final_checkpoint() const { return dir + "/med_bert.ckpt"; }
};

/// Runs steps store.step+1 .. total_steps (so a model restored from a
/// checkpoint continues where it stopped).
template <typename T>
PretrainReport pretrain(model::MedBert<T>& model, const std::vector<ehr::ModelInput>& train,
                        const std::vector<ehr::ModelInput>& valid, const PretrainConfig& config,
                        const PretrainOutput& output = {}) {
  config.validate();
  if (train.empty()) throw EmptyCohort("pretrain: no training patients");
  BatchSchedule schedule(train.size(), config.batch_size, config.seed);
  PretrainReport report;
  const bool write = !output.dir.empty();
  std::string curve_text = curve_csv_header();
  const std::size_t start = model.store().step + 1;
  if (write && start > 1 && std::filesystem::exists(output.curve_path())) {
    for (const auto& row : parse_curve_csv(read_file(output.curve_path())))
      if (row.step < start) curve_text += curve_csv_row(row);
  }
  for (std::size_t step = start; step <= config.total_steps; ++step) {
    const auto batch = make_batch(train, schedule, model.config().vocab_size, config.seed, step);
    const StepResult r = pretrain_step(model, batch, config, step);
    report.steps.push_back({step, r.mlm_loss, r.los_loss});
    if (step % config.eval_every == 0 || step == config.total_steps) {
      CurveRow row{step, r.mlm_loss, r.los_loss, config.los_task ? los_auc(model, valid, config.jobs) : std::nan("")};
      report.curve.push_back(row);
      curve_text += curve_csv_row(row);
      if (write) write_file(output.curve_path(), curve_text);
    }
    if (write && config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
      model::save_med_bert(output.checkpoint_name(step), model);
      report.checkpoints.push_back(output.checkpoint_name(step));
    }
  }
  if (!report.steps.empty()) {
    report.final_mlm_loss = report.steps.back().mlm_loss;
    report.final_los_loss = report.steps.back().los_loss;
  }
  if (write) {
    model::save_med_bert(output.final_checkpoint(), model);
    report.checkpoints.push_back(output.final_checkpoint());
  }
  return report;
}

/// Deterministic hold-out split of encoded inputs for pretraining.
inline std::pair<std::vector<ehr::ModelInput>, std::vector<ehr::ModelInput>> holdout_split(
    const std::vector<ehr::ModelInput>& inputs, double valid_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(inputs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, {kHoldoutStream}));
  rng.shuffle(order);
  const auto n_valid = static_cast<std::size_t>(std::floor(valid_fraction * static_cast<double>(inputs.size()) + 1e-9));
  std::vector<ehr::ModelInput> train, valid;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_valid ? valid : train).push_back(inputs[order[i]]);
  return {std::move(train), std::move(valid)};
}

/// File-level driver: reads a JSONL cohort, builds (or reads) the
/// vocabulary, trains and writes into out_dir:
///   vocab.tsv, pretrain_config.json, loss_curve.csv,
///   checkpoint_step_<N>.ckpt, med_bert.ckpt
/// With `resume_from` the model, optimizer moments and step come from that
/// checkpoint and the vocabulary from out_dir/vocab.tsv.
inline PretrainReport run_pretraining(const std::string& cohort_path, model::MedBertConfig model_config,
                                      const PretrainConfig& config, const std::string& out_dir,
                                      const std::string& resume_from = "") {
  config.validate();
  const auto cohort = ehr::load_jsonl(cohort_path);
  if (cohort.empty()) throw EmptyCohort("run_pretraining: " + cohort_path + " holds no patients");
  std::filesystem::create_directories(out_dir);
  const std::string vocab_path = out_dir + "/vocab.tsv";
  ehr::Vocabulary vocab = resume_from.empty() ? ehr::build_vocabulary(cohort) : ehr::Vocabulary::load(vocab_path);
  if (resume_from.empty()) vocab.save(vocab_path);
  model_config.vocab_size = vocab.size();
  std::vector<ehr::ModelInput> inputs;
  inputs.reserve(cohort.size());
  for (const auto& p : cohort) inputs.push_back(ehr::encode_patient(p, vocab, {model_config.max_seq_len, false}));
  auto [train, valid] = holdout_split(inputs, config.valid_fraction, config.seed);
  write_file(out_dir + "/pretrain_config.json",
             nlohmann::json{{"model", model_config}, {"pretrain", config}}.dump(2) + "\n");
  model::MedBert<float> model = resume_from.empty() ? model::MedBert<float>(model_config, config.seed)
                                                    : model::load_med_bert<float>(resume_from, &model_config);
  return pretrain(model, train, valid, config, PretrainOutput{out_dir});
}

}  // namespace ehrbert::pretrain
