// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

#include "ehrbert/cli/app.hpp"

namespace fs = std::filesystem;
using ehrbert::read_file;
using ehrbert::cli::run;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result call(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ehrbert_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  /// Small cohort plus a briefly pretrained model in dir/pre.
  void pretrained_fixture() {
    ASSERT_EQ(call({"synth", "--out", path("c.jsonl"), "--n", "400", "--seed", "4"}).code, 0);
    ASSERT_EQ(call({"pretrain", "--cohort", path("c.jsonl"), "--out", path("pre"), "--total_steps", "10",
                    "--eval_every", "5", "--n_layers", "1", "--max_seq_len", "64"})
                  .code,
              0);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, HelpExitsZeroAndListsKeys) {
  auto r = call({"--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"synth", "vocab", "pretrain", "finetune", "ex1", "sweep", "viz", "gradcheck"})
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
  r = call({"sweep", "--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* key : {"--seed", "--jobs", "--config", "--sizes", "--replicates", "--conditions", "--lr"})
    EXPECT_NE(r.out.find(key), std::string::npos) << key;
}

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(call({}).code, 1);
  EXPECT_EQ(call({"frobnicate"}).code, 1);
  EXPECT_EQ(call({"synth", "--out", path("a.jsonl"), "--no_such_flag", "1"}).code, 1);
  EXPECT_EQ(call({"synth"}).code, 1);  // --out missing
  auto r = call({"synth", "--out", path("a.jsonl"), "--n", "ten"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("n_patients"), std::string::npos);
  EXPECT_EQ(call({"synth", "--out", path("a.jsonl"), "--outcome_prevalence", "2"}).code, 1);

  ehrbert::write_file(path("bad.config"), "seed = 3\nnot_a_key = 1\n");
  r = call({"synth", "--config", path("bad.config"), "--out", path("a.jsonl")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("not_a_key"), std::string::npos);
}

TEST_F(CliTest, RuntimeErrorsExitTwo) {
  auto r = call({"vocab", "--cohort", path("missing.jsonl"), "--out", path("v.tsv")});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, SynthIsByteIdenticalAndWritesManifest) {
  ASSERT_EQ(call({"synth", "--out", path("a.jsonl"), "--n", "50", "--seed", "9"}).code, 0);
  ASSERT_EQ(call({"synth", "--out", path("b.jsonl"), "--n", "50", "--seed", "9"}).code, 0);
  ASSERT_EQ(call({"synth", "--out", path("c.jsonl"), "--n", "50", "--seed", "10"}).code, 0);
  EXPECT_EQ(read_file(path("a.jsonl")), read_file(path("b.jsonl")));
  EXPECT_NE(read_file(path("a.jsonl")), read_file(path("c.jsonl")));

  const auto m = nlohmann::json::parse(read_file(path("a.jsonl.manifest.json")));
  EXPECT_EQ(m["subcommand"], "synth");
  EXPECT_EQ(m["seed"], "9");
  EXPECT_EQ(m["config"]["n_patients"], "50");
  EXPECT_EQ(m["outputs"][0]["sha256"], ehrbert::cli::sha256_file(path("a.jsonl")));
  EXPECT_NE(read_file(path("a.jsonl.config")).find("seed = 9"), std::string::npos);
}

TEST_F(CliTest, FlagsOverrideConfigFile) {
  ehrbert::write_file(path("run.config"), "# comment\nn_patients = 30\nseed = 2\n");
  ASSERT_EQ(call({"synth", "--config", path("run.config"), "--out", path("a.jsonl"), "--seed", "7"}).code, 0);
  ASSERT_EQ(call({"synth", "--out", path("b.jsonl"), "--n", "30", "--seed", "7"}).code, 0);
  EXPECT_EQ(read_file(path("a.jsonl")), read_file(path("b.jsonl")));
  // The written snapshot replays the run.
  ASSERT_EQ(call({"synth", "--config", path("a.jsonl.config"), "--out", path("c.jsonl")}).code, 0);
  EXPECT_EQ(read_file(path("a.jsonl")), read_file(path("c.jsonl")));
}

TEST_F(CliTest, ShaMatchesKnownDigest) {
  EXPECT_EQ(ehrbert::cli::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(ehrbert::cli::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_F(CliTest, GradcheckExitCodes) {
  auto r = call({"gradcheck", "--models", "gru,retain"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("gru"), std::string::npos);
  EXPECT_NE(r.out.find("retain"), std::string::npos);
  EXPECT_EQ(call({"gradcheck", "--models", "gru", "--tolerance", "1e-30"}).code, 2);
  EXPECT_EQ(call({"gradcheck", "--models", "lstm"}).code, 1);
}

TEST_F(CliTest, PretrainFinetuneAndViz) {
  pretrained_fixture();
  for (const char* f : {"vocab.tsv", "med_bert.ckpt", "loss_curve.csv", "run.config", "manifest.json"})
    EXPECT_TRUE(fs::exists(path(std::string("pre/") + f))) << f;

  const std::vector<std::string> ft = {"finetune", "--cohort", path("c.jsonl"), "--vocab", path("pre/vocab.tsv"),
                                       "--med_bert", path("pre/med_bert.ckpt"), "--model", "Med-BERT_only (FFL)",
                                       "--max_epochs", "2"};
  auto args = ft;
  args.insert(args.end(), {"--out", path("ft")});
  auto r = call(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto result = nlohmann::json::parse(read_file(path("ft/result.json")));
  EXPECT_GE(result["test_auc"].get<double>(), 0.0);
  EXPECT_LE(result["test_auc"].get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(path("ft/model.ckpt")));

  // Baselines with Med-BERT inputs need the checkpoint.
  EXPECT_EQ(call({"finetune", "--cohort", path("c.jsonl"), "--vocab", path("pre/vocab.tsv"), "--model",
                  "GRU+Med-BERT", "--out", path("ft2")})
                .code,
            1);

  r = call({"viz", "--cohort", path("c.jsonl"), "--vocab", path("pre/vocab.tsv"), "--med_bert",
            path("pre/med_bert.ckpt"), "--out", path("viz"), "--head", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto html = read_file(path("viz/attention.html"));
  EXPECT_NE(html.find("<svg"), std::string::npos);
  EXPECT_EQ(html.find("http"), html.find("http://www.w3.org/2000/svg"));
  EXPECT_EQ(read_file(path("viz/locality.csv")).rfind("layer,head,", 0), 0u);
  EXPECT_EQ(call({"viz", "--cohort", path("c.jsonl"), "--vocab", path("pre/vocab.tsv"), "--med_bert",
                  path("pre/med_bert.ckpt"), "--out", path("viz"), "--layer", "5"})
                .code,
            2);
}

TEST_F(CliTest, SweepHonoursSizesAndRerunsIdentically) {
  pretrained_fixture();
  auto sweep = [&](const std::string& out) {
    return call({"sweep", "--cohort", path("c.jsonl"), "--vocab", path("pre/vocab.tsv"), "--med_bert",
                 path("pre/med_bert.ckpt"), "--conditions", "GRU,RETAIN+t-W2V", "--sizes", "40,80", "--replicates",
                 "2", "--max_epochs", "2", "--sg_steps", "20", "--out", path(out)});
  };
  auto r = sweep("s1");
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(sweep("s2").code, 0);
  const auto rep = ehrbert::eval::ExperimentReport::from_json(nlohmann::json::parse(read_file(path("s1/sweep.json"))));
  ASSERT_EQ(rep.rows.size(), 4u);
  EXPECT_EQ(rep.at(40, "GRU").aucs.size(), 2u);
  EXPECT_EQ(rep.at(80, "RETAIN+t-W2V").aucs.size(), 2u);
  // Everything except wall-clock columns is reproducible.
  EXPECT_EQ(read_file(path("s1/sweep_long.csv")), read_file(path("s2/sweep_long.csv")));
  EXPECT_EQ(read_file(path("s1/skipgram.ckpt")), read_file(path("s2/skipgram.ckpt")));
  EXPECT_EQ(call({"sweep", "--cohort", path("c.jsonl"), "--vocab", path("pre/vocab.tsv"), "--conditions", "GRU",
                  "--sizes", "100000", "--out", path("s3")})
                .code,
            2);
}

TEST_F(CliTest, Ex1RunsRequestedConditions) {
  pretrained_fixture();
  auto r = call({"ex1", "--cohort", path("c.jsonl"), "--vocab", path("pre/vocab.tsv"), "--med_bert",
                 path("pre/med_bert.ckpt"), "--conditions", "GRU,GRU+Med-BERT", "--replicates", "2", "--max_epochs",
                 "1", "--jobs", "2", "--out", path("ex1")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = read_file(path("ex1/ex1.csv"));
  EXPECT_EQ(csv.rfind("size,condition,mean,std,n,wall_seconds\n", 0), 0u);
  EXPECT_NE(csv.find(",GRU+Med-BERT,"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("ex1/skipgram.ckpt")));
  EXPECT_EQ(call({"ex1", "--cohort", path("c.jsonl"), "--vocab", path("pre/vocab.tsv"), "--conditions", "LSTM",
                  "--out", path("ex1b")})
                .code,
            1);
}
