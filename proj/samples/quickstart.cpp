// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

// End to end in one process: synthetic cohort, pretraining, fine-tuning a
// scratch GRU against a GRU on Med-BERT inputs, and an attention export.
//
//   quickstart [out_dir]

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "ehrbert/eval/finetune.hpp"
#include "ehrbert/pretrain/pretrainer.hpp"
#include "ehrbert/synth/cohort.hpp"
#include "ehrbert/viz/attention.hpp"

using namespace ehrbert;

int main(int argc, char** argv) {
  const std::string out = argc > 1 ? argv[1] : "quickstart_out";
  std::filesystem::create_directories(out);

  synth::SynthConfig sc;
  sc.n_patients = 3000;
  sc.seed = 42;
  const auto cohort = synth::generate_cohort(sc);
  const auto vocab = ehr::build_vocabulary(cohort);
  std::printf("%zu patients, %zu tokens\n", cohort.size(), vocab.size());

  const auto split = synth::split_cohort(cohort, {}, 42);
  auto encode = [&](const std::vector<ehr::PatientRecord>& ps) {
    std::vector<ehr::ModelInput> v;
    for (const auto& p : ps) v.push_back(ehr::encode_patient(p, vocab));
    return v;
  };
  const auto train = encode(split.train), valid = encode(split.valid), test = encode(split.test);

  // Pretraining never looks at outcome labels.
  model::MedBert<float> bert(model::MedBertConfig::desk(vocab.size()), 42);
  pretrain::PretrainConfig pc;
  pc.total_steps = 600;
  pc.eval_every = 200;
  const auto rep = pretrain::pretrain(bert, train, valid, pc, pretrain::PretrainOutput{out});
  for (const auto& r : rep.curve)
    std::printf("step %4zu  masked-LM loss %.3f  LOS AUC %.3f\n", r.step, r.mlm_loss, r.los_auc_on_valid);

  // Small labelled training set.
  const auto small = synth::subsample_items(train, 300, 7, [](const ehr::ModelInput& in) { return *in.outcome_label; });
  for (const char* label : {"GRU", "GRU+Med-BERT", "Med-BERT_only (FFL)"}) {
    eval::FinetuneConfig fc;
    fc.spec = baselines::ModelSpec::parse(label);
    fc.seed = 7;
    const auto r = eval::run_finetune<float>(small, valid, test, fc, {&bert, nullptr}, vocab.size());
    std::printf("%-20s test AUC %.3f (epoch %zu)\n", label, r.test_auc, r.best_epoch);
  }

  model::save_med_bert(out + "/med_bert.ckpt", bert);
  const auto att = viz::extract_attention(out + "/med_bert.ckpt", split.test.front(), vocab);
  write_file(out + "/attention.html", viz::render_attention(att, bert.config().n_layers - 1, std::nullopt));
  write_file(out + "/locality.csv", viz::locality_csv(viz::summarize_locality(att)));
  std::cout << "attention of " << att.patient_id << " written to " << out << "/attention.html\n";
}
