// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrbert/baselines/compose.hpp"
#include "ehrbert/core/parallel.hpp"
#include "ehrbert/eval/auc.hpp"

namespace ehrbert::eval {

struct FinetuneConfig {
  baselines::ModelSpec spec;
  /// Passes over the training set at most.
  std::size_t max_epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;
  /// Validation evaluations (one per epoch) without improvement before stopping.
  std::size_t early_stop_patience = 5;
  std::size_t rnn_hidden = 32;
  bool freeze_encoder = false;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;

  void validate() const {
    spec.validate();
    if (max_epochs == 0) throw ConfigError("FinetuneConfig.max_epochs must be positive");
    if (batch_size == 0) throw ConfigError("FinetuneConfig.batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("FinetuneConfig.lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("FinetuneConfig.weight_decay must be >= 0");
    if (early_stop_patience == 0) throw ConfigError("FinetuneConfig.early_stop_patience must be positive");
    if (rnn_hidden == 0) throw ConfigError("FinetuneConfig.rnn_hidden must be positive");
  }
};

struct FinetuneResult {
  double test_auc = 0;
  double best_valid_auc = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::vector<double> valid_auc_per_epoch;
};

inline std::vector<bool> outcome_labels(const std::vector<ehr::ModelInput>& inputs, const char* what) {
  std::vector<bool> labels;
  labels.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (!in.outcome_label) throw ContractError(std::string(what) + ": patient without outcome label");
    labels.push_back(*in.outcome_label);
  }
  const auto pos = std::count(labels.begin(), labels.end(), true);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size()))
    throw DegenerateLabels(std::string(what) + ": outcome labels are all " + (pos == 0 ? "negative" : "positive"));
  return labels;
}

/// Eval-mode outcome scores (logits; AUC only needs their order).
template <typename T>
std::vector<double> predict_scores(const baselines::Predictor<T>& model, const std::vector<ehr::ModelInput>& inputs,
                                   std::size_t jobs = 1) {
  std::vector<double> out(inputs.size());
  parallel_for(inputs.size(), jobs, [&](std::size_t i) {
    ad::Tape<T> tape;
    out[i] = static_cast<double>(model.logit(tape, inputs[i], false, nullptr).item());
  });
  return out;
}

template <typename T>
double evaluate_auc(const baselines::Predictor<T>& model, const std::vector<ehr::ModelInput>& inputs,
                    std::size_t jobs = 1) {
  const auto labels = outcome_labels(inputs, "evaluate_auc");
  return compute_auc(predict_scores(model, inputs, jobs), labels);
}

/// Learned embeddings take the width of the pretrained artifact when one
/// is present so that every input mode feeds the same-sized baseline.
template <typename T>
baselines::PredictorConfig predictor_config(const FinetuneConfig& config, const baselines::Artifacts<T>& artifacts,
                                            std::size_t vocab_size) {
  baselines::PredictorConfig pc;
  pc.vocab_size = vocab_size;
  pc.rnn_hidden = config.rnn_hidden;
  pc.freeze_encoder = config.freeze_encoder;
  if (artifacts.skipgram) pc.embed_dim = artifacts.skipgram->in.cols();
  if (artifacts.med_bert) pc.embed_dim = artifacts.med_bert->config().hidden_dim;
  return pc;
}

/// Binary cross-entropy training on outcome_label with mini-batch AdamW,
/// validation AUC after every epoch, early stopping, and the test AUC of the
/// best-validation parameters. `model_out`, when given, receives that model.
template <typename T>
FinetuneResult run_finetune(const std::vector<ehr::ModelInput>& train, const std::vector<ehr::ModelInput>& valid,
                            const std::vector<ehr::ModelInput>& test, const FinetuneConfig& config,
                            const baselines::Artifacts<T>& artifacts, std::size_t vocab_size,
                            std::unique_ptr<baselines::Predictor<T>>* model_out = nullptr) {
  config.validate();
  const auto train_labels = outcome_labels(train, "run_finetune(train)");
  outcome_labels(valid, "run_finetune(valid)");
  outcome_labels(test, "run_finetune(test)");
  const auto pc = predictor_config(config, artifacts, vocab_size);
  auto model = std::make_unique<baselines::Predictor<T>>(config.spec, pc, artifacts, config.seed);
  const auto stores = model->stores();

  ad::AdamWConfig opt;
  opt.lr = config.lr;
  opt.weight_decay = config.weight_decay;
  opt.max_grad_norm = config.max_grad_norm;

  FinetuneResult result;
  result.best_valid_auc = -1.0;
  auto best = model->snapshot();
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(derive_seed(config.seed, {0x657063ULL, epoch}));
    shuffle.shuffle(order);
    for (std::size_t start = 0, batch_no = 0; start < order.size(); start += config.batch_size, ++batch_no) {
      const std::size_t B = std::min(config.batch_size, order.size() - start);
      std::vector<std::unique_ptr<ad::Tape<T>>> tapes(B);
      const T seed_grad = T(1) / static_cast<T>(B);
      parallel_for(B, config.jobs, [&](std::size_t i) {
        const std::size_t idx = order[start + i];
        tapes[i] = std::make_unique<ad::Tape<T>>();
        Rng rng(derive_seed(config.seed, {0x64726fULL, epoch, batch_no, i}));
        auto z = model->logit(*tapes[i], train[idx], true, &rng);
        tapes[i]->backward(ad::binary_cross_entropy_logit(z, static_cast<bool>(train_labels[idx])), seed_grad);
      });
      for (auto& t : tapes) t->accumulate_parameter_grads();
      tapes.clear();
      baselines::multi_store_step(stores, opt);
    }
    const double auc = evaluate_auc(*model, valid, config.jobs);
    result.valid_auc_per_epoch.push_back(auc);
    result.epochs_run = epoch;
    if (auc > result.best_valid_auc) {
      result.best_valid_auc = auc;
      result.best_epoch = epoch;
      best = model->snapshot();
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      break;
    }
  }
  model->restore(best);
  result.test_auc = evaluate_auc(*model, test, config.jobs);
  if (model_out) *model_out = std::move(model);
  return result;
}

}  // namespace ehrbert::eval
