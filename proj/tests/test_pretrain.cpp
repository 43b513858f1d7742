// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "ehrbert/pretrain/pretrainer.hpp"
#include "ehrbert/synth/cohort.hpp"

namespace ad = ehrbert::ad;
namespace ehr = ehrbert::ehr;
namespace pt = ehrbert::pretrain;
using ehrbert::Rng;
using ehrbert::model::MedBert;
using ehrbert::model::MedBertConfig;

namespace {

ehr::ModelInput five_codes() {
  ehr::ModelInput in;
  in.code_ids = {3, 4, 5, 6, 7};
  in.serialization_ids = {0, 1, 0, 1, 2};
  in.visit_ids = {1, 1, 2, 2, 2};
  in.length = 5;
  in.prolonged_los_label = true;
  return in;
}

struct SmallWorld {
  ehr::Vocabulary vocab;
  std::vector<ehr::ModelInput> inputs;
};

SmallWorld small_world(std::size_t n, std::uint64_t seed, std::size_t vocab_size = 60) {
  ehrbert::synth::SynthConfig sc;
  sc.n_patients = n;
  sc.vocab_size = vocab_size;
  sc.mean_visits = 3;
  sc.seed = seed;
  const auto cohort = ehrbert::synth::generate_cohort(sc);
  SmallWorld w{ehr::build_vocabulary(cohort), {}};
  for (const auto& p : cohort) w.inputs.push_back(ehr::encode_patient(p, w.vocab, {128, false}));
  return w;
}

pt::PretrainConfig quick_config() {
  pt::PretrainConfig c;
  c.batch_size = 8;
  c.total_steps = 30;
  c.eval_every = 10;
  c.seed = 5;
  return c;
}

std::string temp_dir(const std::string& name) {
  const auto dir = std::filesystem::path(::testing::TempDir()) / ("ehrbert_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST(Masking, BranchFrequenciesAndUniformPosition) {
  const auto in = five_codes();
  std::size_t branch[3] = {0, 0, 0};
  std::size_t position[5] = {0, 0, 0, 0, 0};
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    Rng rng(ehrbert::derive_seed(99, {static_cast<std::uint64_t>(t)}));
    const auto ex = pt::apply_masking(in, 50, rng);
    ++branch[static_cast<int>(ex.branch)];
    ++position[ex.masked_position];
    std::size_t changed = 0;
    for (std::size_t i = 0; i < 5; ++i) changed += ex.input.code_ids[i] != in.code_ids[i];
    EXPECT_LE(changed, 1u);
    EXPECT_EQ(ex.original_code_id, in.code_ids[ex.masked_position]);
  }
  EXPECT_GE(branch[0] / double(trials), 0.78);
  EXPECT_LE(branch[0] / double(trials), 0.82);
  for (int b : {1, 2}) {
    EXPECT_GE(branch[b] / double(trials), 0.08);
    EXPECT_LE(branch[b] / double(trials), 0.12);
  }
  double chi2 = 0;
  for (std::size_t c : position) chi2 += (c - trials / 5.0) * (c - trials / 5.0) / (trials / 5.0);
  EXPECT_LT(chi2, 13.2767);  // chi-square, 4 degrees of freedom, p = 0.01
}

TEST(Masking, LengthOneAlwaysMasksPositionZero) {
  ehr::ModelInput in;
  in.code_ids = {9, 0, 0};
  in.serialization_ids = {0, 0, 0};
  in.visit_ids = {1, 0, 0};
  in.length = 1;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(s);
    EXPECT_EQ(pt::apply_masking(in, 20, rng).masked_position, 0u);
  }
}

TEST(Masking, RandomBranchAvoidsReservedIds) {
  const auto in = five_codes();
  std::set<std::int32_t> seen;
  for (std::uint64_t s = 0; s < 5000; ++s) {
    Rng rng(s);
    const auto ex = pt::apply_masking(in, 8, rng);
    if (ex.branch != pt::MaskBranch::random) continue;
    const auto id = ex.input.code_ids[ex.masked_position];
    EXPECT_GE(id, ehr::kNumReserved);
    EXPECT_LT(id, 8);
    seen.insert(id);
  }
  EXPECT_EQ(seen.size(), 5u);
}

TEST(Masking, LeavesOtherStreamsAlone) {
  const auto in = five_codes().padded_to(8);
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(s);
    const auto ex = pt::apply_masking(in, 30, rng);
    EXPECT_EQ(ex.input.serialization_ids, in.serialization_ids);
    EXPECT_EQ(ex.input.visit_ids, in.visit_ids);
    EXPECT_EQ(ex.input.length, in.length);
    EXPECT_EQ(ex.los_label, in.prolonged_los_label);
    EXPECT_LT(ex.masked_position, in.length);
  }
}

TEST(Masking, AllPadIsContractError) {
  ehr::ModelInput in;
  in.code_ids = {0, 0};
  in.serialization_ids = {0, 0};
  in.visit_ids = {0, 0};
  Rng rng(1);
  EXPECT_THROW(pt::apply_masking(in, 20, rng), ehrbert::ContractError);
}

TEST(BatchSchedule, EachEpochVisitsEveryPatientOnce) {
  pt::BatchSchedule s(10, 5, 3);
  std::multiset<std::size_t> first, second;
  for (std::size_t step = 1; step <= 2; ++step)
    for (auto i : s.indices(step)) first.insert(i);
  for (std::size_t step = 3; step <= 4; ++step)
    for (auto i : s.indices(step)) second.insert(i);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(first.count(i), 1u);
    EXPECT_EQ(second.count(i), 1u);
  }
  pt::BatchSchedule fresh(10, 5, 3);
  EXPECT_EQ(fresh.indices(4), s.indices(4));
}

TEST(PretrainStep, InitialLossesNearUniform) {
  auto w = small_world(64, 3);
  MedBert<float> model(MedBertConfig::desk(w.vocab.size()), 1);
  // Balanced LOS labels.
  for (std::size_t i = 0; i < w.inputs.size(); ++i) w.inputs[i].prolonged_los_label = i % 2 == 0;
  pt::PretrainConfig cfg = quick_config();
  cfg.batch_size = 64;
  pt::BatchSchedule sched(w.inputs.size(), cfg.batch_size, cfg.seed);
  const auto r = pt::pretrain_step(model, pt::make_batch(w.inputs, sched, w.vocab.size(), cfg.seed, 1), cfg, 1);
  const double lnv = std::log(static_cast<double>(w.vocab.size()));
  EXPECT_NEAR(r.mlm_loss, lnv, 0.1 * lnv);
  EXPECT_NEAR(r.los_loss, std::log(2.0), 0.1 * std::log(2.0));
  EXPECT_TRUE(std::isfinite(r.grad_norm));
  EXPECT_EQ(model.store().step, 1u);
}

TEST(PretrainStep, ResultIndependentOfJobs) {
  auto w = small_world(40, 4);
  MedBert<float> a(MedBertConfig::desk(w.vocab.size()), 2), b(MedBertConfig::desk(w.vocab.size()), 2);
  auto cfg = quick_config();
  cfg.total_steps = 5;
  pt::pretrain(a, w.inputs, {}, cfg);
  cfg.jobs = 3;
  pt::pretrain(b, w.inputs, {}, cfg);
  EXPECT_EQ(a.store().snapshot(), b.store().snapshot());
}

TEST(PretrainStep, ZeroLosWeightMatchesPureMaskedLm) {
  auto w = small_world(40, 6);
  MedBert<float> a(MedBertConfig::desk(w.vocab.size()), 2), b(MedBertConfig::desk(w.vocab.size()), 2);
  auto cfg = quick_config();
  cfg.total_steps = 12;
  cfg.los_loss_weight = 0.0;
  pt::pretrain(a, w.inputs, {}, cfg);
  cfg.los_task = false;
  pt::pretrain(b, w.inputs, {}, cfg);
  const auto sa = a.store().snapshot(), sb = b.store().snapshot();
  std::size_t compared = 0;
  for (const auto& [name, value] : sa) {
    if (name.rfind("los.", 0) == 0) continue;
    EXPECT_EQ(value, sb.at(name)) << name;
    ++compared;
  }
  EXPECT_GT(compared, 20u);
}

TEST(Pretrain, ResumeReproducesUninterruptedRun) {
  auto w = small_world(50, 7);
  const std::string dir = temp_dir("resume");
  auto cfg = quick_config();
  cfg.total_steps = 24;
  cfg.checkpoint_every = 12;
  MedBert<float> full(MedBertConfig::desk(w.vocab.size()), 3);
  const auto full_report = pt::pretrain(full, w.inputs, w.inputs, cfg, pt::PretrainOutput{dir});
  ASSERT_EQ(full_report.steps.size(), 24u);

  auto resumed = ehrbert::model::load_med_bert<float>(dir + "/checkpoint_step_12.ckpt");
  EXPECT_EQ(resumed.store().step, 12u);
  const auto tail = pt::pretrain(resumed, w.inputs, w.inputs, cfg);
  ASSERT_EQ(tail.steps.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(tail.steps[i], full_report.steps[12 + i]);
  EXPECT_EQ(resumed.store().snapshot(), full.store().snapshot());
}

TEST(Pretrain, LossDecreasesAndCurveIsWritten) {
  auto w = small_world(200, 8);
  const std::string dir = temp_dir("curve");
  auto cfg = quick_config();
  cfg.batch_size = 16;
  cfg.total_steps = 300;
  cfg.eval_every = 50;
  MedBert<float> model(MedBertConfig::desk(w.vocab.size()), 4);
  const auto report = pt::pretrain(model, w.inputs, w.inputs, cfg, pt::PretrainOutput{dir});
  ASSERT_EQ(report.curve.size(), 6u);
  double early = 0, late = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    early += report.steps[i].mlm_loss;
    late += report.steps[250 + i].mlm_loss;
  }
  EXPECT_LT(late, early);
  const auto parsed = pt::parse_curve_csv(ehrbert::read_file(dir + "/loss_curve.csv"));
  ASSERT_EQ(parsed.size(), report.curve.size());
  for (std::size_t i = 0; i < parsed.size(); ++i) {
    EXPECT_EQ(parsed[i].step, report.curve[i].step);
    EXPECT_EQ(parsed[i].mlm_loss, report.curve[i].mlm_loss);
    EXPECT_EQ(parsed[i].los_auc_on_valid, report.curve[i].los_auc_on_valid);
    EXPECT_TRUE(std::isfinite(parsed[i].mlm_loss));
    EXPECT_TRUE(std::isfinite(parsed[i].los_loss));
  }
  EXPECT_TRUE(std::filesystem::exists(dir + "/med_bert.ckpt"));
}

TEST(Pretrain, RunPretrainingFromFiles) {
  ehrbert::synth::SynthConfig sc;
  sc.n_patients = 60;
  sc.vocab_size = 40;
  sc.seed = 2;
  const std::string dir = temp_dir("files");
  ehr::save_jsonl(dir + "/cohort.jsonl", ehrbert::synth::generate_cohort(sc));
  auto cfg = quick_config();
  cfg.total_steps = 10;
  cfg.checkpoint_every = 5;
  MedBertConfig mc = MedBertConfig::desk(0);
  const auto r1 = pt::run_pretraining(dir + "/cohort.jsonl", mc, cfg, dir + "/a");
  const auto r2 = pt::run_pretraining(dir + "/cohort.jsonl", mc, cfg, dir + "/b");
  EXPECT_EQ(r1.steps, r2.steps);
  for (const char* f : {"vocab.tsv", "pretrain_config.json", "loss_curve.csv", "checkpoint_step_5.ckpt", "med_bert.ckpt"}) {
    EXPECT_TRUE(std::filesystem::exists(dir + "/a/" + f)) << f;
    EXPECT_EQ(ehrbert::read_file(dir + "/a/" + f), ehrbert::read_file(dir + "/b/" + f)) << f;
  }
  const auto resumed = pt::run_pretraining(dir + "/cohort.jsonl", mc, cfg, dir + "/a", dir + "/a/checkpoint_step_5.ckpt");
  ASSERT_EQ(resumed.steps.size(), 5u);
  EXPECT_EQ(resumed.steps.back(), r1.steps.back());
  EXPECT_EQ(ehrbert::read_file(dir + "/a/loss_curve.csv"), ehrbert::read_file(dir + "/b/loss_curve.csv"));
  EXPECT_THROW(pt::run_pretraining(dir + "/missing.jsonl", mc, cfg, dir + "/c"), ehrbert::IoError);
}

TEST(EvaluateMlm, CountsEveryRealPosition) {
  auto w = small_world(5, 9);
  MedBert<float> model(MedBertConfig::desk(w.vocab.size()), 4);
  std::size_t total = 0;
  for (const auto& in : w.inputs) total += in.length;
  const auto e = pt::evaluate_mlm(model, w.inputs);
  EXPECT_EQ(e.n_masks, total);
  EXPECT_GE(e.accuracy, 0.0);
  EXPECT_LE(e.accuracy, 1.0);
}
