// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <iostream>

#include <gtest/gtest.h>

#include "ehrbert/autodiff/grad_check.hpp"
#include "ehrbert/baselines/compose.hpp"

namespace ad = ehrbert::ad;
namespace bl = ehrbert::baselines;
namespace ehr = ehrbert::ehr;
using ehrbert::Rng;

namespace {

ad::Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  ad::Tensor<double> t({r, c});
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

ehr::ModelInput make_input(const std::vector<std::vector<std::int32_t>>& visits, bool label = true) {
  ehr::ModelInput in;
  for (std::size_t v = 0; v < visits.size(); ++v)
    for (std::size_t k = 0; k < visits[v].size(); ++k) {
      in.code_ids.push_back(visits[v][k]);
      in.serialization_ids.push_back(static_cast<std::int32_t>(k));
      in.visit_ids.push_back(static_cast<std::int32_t>(v + 1));
    }
  in.length = in.code_ids.size();
  in.outcome_label = label;
  return in;
}

void report(const char* what, const ad::GradCheckReport& r) {
  std::cout << what << " grad check: max rel error " << r.max_rel_error << "\n";
}

}  // namespace

TEST(Gru, ZeroWeightsGiveZeroState) {
  ad::ParameterStore<double> store;
  Rng rng(1);
  auto p = bl::GruParams<double>::create(store, "g", 3, 4, rng);
  for (std::size_t i = 0; i < store.size(); ++i)
    std::fill(store.at(i).value.values().begin(), store.at(i).value.values().end(), 0.0);
  ad::Tape<double> tape;
  auto h = bl::gru_forward(tape.constant(random_matrix(6, 3, rng)), p);
  EXPECT_EQ(h.shape(), (ad::Shape{1, 4}));
  for (double v : h.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Gru, SingleStepMatchesHandCalculation) {
  // 2-dim input, 2-dim state: from h = 0, h' = z * tanh(x Wn + bn).
  ad::ParameterStore<double> store;
  Rng rng(1);
  auto p = bl::GruParams<double>::create(store, "g", 2, 2, rng);
  auto& wx = p.wx->value;  // columns: z0 z1 r0 r1 n0 n1
  const double W[2][6] = {{0.5, -0.2, 0.3, 0.1, 0.7, -0.4}, {0.1, 0.6, -0.5, 0.2, 0.2, 0.9}};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 6; ++j) wx.at(i, j) = W[i][j];
  const double b[6] = {0.05, -0.1, 0.0, 0.2, 0.3, -0.2};
  for (int j = 0; j < 6; ++j) p.bx->value[j] = b[j];
  const double x[2] = {1.5, -0.8};
  ad::Tape<double> tape;
  auto h = bl::gru_forward(tape.constant(ad::Tensor<double>({1, 2}, std::vector<double>{x[0], x[1]})), p);
  for (int k = 0; k < 2; ++k) {
    const double z = sigmoid(x[0] * W[0][k] + x[1] * W[1][k] + b[k]);
    const double n = std::tanh(x[0] * W[0][4 + k] + x[1] * W[1][4 + k] + b[4 + k]);
    EXPECT_NEAR(h.value()[k], z * n, 1e-15);
  }
}

TEST(Gru, TwoStepsMatchReferenceRecurrence) {
  ad::ParameterStore<double> store;
  Rng rng(4);
  auto p = bl::GruParams<double>::create(store, "g", 3, 2, rng, 0.5);
  for (auto& v : p.bx->value.values()) v = rng.normal();
  const auto X = random_matrix(2, 3, rng);
  ad::Tape<double> tape;
  auto out = bl::gru_forward(tape.constant(X), p);
  // Reference recurrence with explicit loops.
  const auto &Wx = p.wx->value, &Bx = p.bx->value, &U = p.uzr->value, &Un = p.un->value;
  std::vector<double> h(2, 0.0);
  for (std::size_t t = 0; t < 2; ++t) {
    std::vector<double> z(2), r(2), n(2), next(2);
    for (std::size_t k = 0; k < 2; ++k) {
      double az = Bx[k], ar = Bx[2 + k];
      for (std::size_t i = 0; i < 3; ++i) {
        az += X.at(t, i) * Wx.at(i, k);
        ar += X.at(t, i) * Wx.at(i, 2 + k);
      }
      for (std::size_t j = 0; j < 2; ++j) {
        az += h[j] * U.at(j, k);
        ar += h[j] * U.at(j, 2 + k);
      }
      z[k] = sigmoid(az);
      r[k] = sigmoid(ar);
    }
    for (std::size_t k = 0; k < 2; ++k) {
      double an = Bx[4 + k];
      for (std::size_t i = 0; i < 3; ++i) an += X.at(t, i) * Wx.at(i, 4 + k);
      for (std::size_t j = 0; j < 2; ++j) an += r[j] * h[j] * Un.at(j, k);
      n[k] = std::tanh(an);
      next[k] = (1 - z[k]) * h[k] + z[k] * n[k];
    }
    h = next;
  }
  EXPECT_NEAR(out.value()[0], h[0], 1e-14);
  EXPECT_NEAR(out.value()[1], h[1], 1e-14);
}

TEST(Gru, BidirectionalDoublesWidthAndStatesBounded) {
  ad::ParameterStore<double> store;
  Rng rng(2);
  auto fw = bl::GruParams<double>::create(store, "f", 3, 5, rng, 1.0);
  auto bw = bl::GruParams<double>::create(store, "b", 3, 5, rng, 1.0);
  ad::Tape<double> tape;
  auto x = tape.constant(random_matrix(7, 3, rng, 3.0));
  auto h = bl::gru_forward(x, fw, &bw);
  EXPECT_EQ(h.shape(), (ad::Shape{1, 10}));
  for (double v : bl::gru_states(x, fw).value().values()) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  // The backward half equals a forward pass of the second cell on the reversed rows.
  auto rev = bl::gru_forward(bl::reverse_rows(x), bw);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(h.value()[5 + k], rev.value()[k]);
}

TEST(Gru, InputWidthMismatchIsShapeError) {
  ad::ParameterStore<double> store;
  Rng rng(2);
  auto p = bl::GruParams<double>::create(store, "g", 3, 2, rng);
  ad::Tape<double> tape;
  EXPECT_THROW(bl::gru_forward(tape.constant(random_matrix(2, 4, rng)), p), ehrbert::ShapeError);
}

TEST(Retain, SingleVisitAlphaIsOne) {
  ad::ParameterStore<double> store;
  Rng rng(3);
  auto p = bl::RetainParams<double>::create(store, "r", 4, 3, 3, rng, 0.5);
  ad::Tape<double> tape;
  auto out = bl::retain_forward(tape.constant(random_matrix(1, 4, rng)), p, store);
  EXPECT_EQ(out.alphas.value()[0], 1.0);
}

TEST(Retain, AttentionRangesAndShiftInvariance) {
  ad::ParameterStore<double> store;
  Rng rng(3);
  auto p = bl::RetainParams<double>::create(store, "r", 4, 3, 5, rng, 0.8);
  const auto V = random_matrix(6, 4, rng, 2.0);
  ad::Tape<double> t1;
  auto a = bl::retain_forward(t1.constant(V), p, store);
  double s = 0;
  for (double v : a.alphas.value().values()) s += v;
  EXPECT_NEAR(s, 1.0, 1e-6);
  EXPECT_EQ(a.betas.shape(), (ad::Shape{6, 4}));
  for (double v : a.betas.value().values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  // Shifting every alpha logit by a constant leaves alpha unchanged.
  store.get("r.alpha.b").value[0] += 3.0;
  ad::Tape<double> t2;
  auto b = bl::retain_forward(t2.constant(V), p, store);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(a.alphas.value()[j], b.alphas.value()[j], 1e-12);
}

TEST(Retain, ContextIsAlphaWeightedBetaTimesVisit) {
  ad::ParameterStore<double> store;
  Rng rng(8);
  auto p = bl::RetainParams<double>::create(store, "r", 3, 2, 2, rng, 0.7);
  const auto V = random_matrix(4, 3, rng);
  ad::Tape<double> tape;
  auto out = bl::retain_forward(tape.constant(V), p, store);
  const auto &w = store.get("r.out.w").value, &b0 = store.get("r.out.b").value;
  double logit = b0[0];
  for (std::size_t d = 0; d < 3; ++d) {
    double c = 0;
    for (std::size_t j = 0; j < 4; ++j) c += out.alphas.value()[j] * out.betas.value().at(j, d) * V.at(j, d);
    logit += c * w[d];
  }
  EXPECT_NEAR(out.logit.item(), logit, 1e-12);
}

TEST(GradCheck, GruAndBiGru) {
  Rng rng(10);
  ad::ParameterStore<double> store;
  auto fw = bl::GruParams<double>::create(store, "f", 3, 4, rng, 0.5);
  auto bw = bl::GruParams<double>::create(store, "b", 3, 4, rng, 0.5);
  for (const char* n : {"f.bx", "b.bx"})
    for (auto& v : store.get(n).value.values()) v = 0.3 * rng.normal();
  auto& x = store.add("x", random_matrix(5, 3, rng));
  auto& w = store.add("w", random_matrix(8, 1, rng));
  ad::LossClosure<double> uni = [&](ad::Tape<double>& t) {
    auto h = bl::gru_forward(t.param(x), fw);
    return ad::binary_cross_entropy_logit(ad::matmul(h, ad::slice_rows(t.param(w), 0, 4)), true);
  };
  ad::LossClosure<double> bi = [&](ad::Tape<double>& t) {
    auto h = bl::gru_forward(t.param(x), fw, &bw);
    return ad::binary_cross_entropy_logit(ad::matmul(h, t.param(w)), false);
  };
  const auto r1 = ad::grad_check(uni, store), r2 = ad::grad_check(bi, store);
  report("GRU", r1);
  report("Bi-GRU", r2);
  EXPECT_TRUE(r1.passed) << r1.max_rel_error;
  EXPECT_TRUE(r2.passed) << r2.max_rel_error;
}

TEST(GradCheck, Retain) {
  Rng rng(11);
  ad::ParameterStore<double> store;
  auto p = bl::RetainParams<double>::create(store, "r", 4, 3, 3, rng, 0.5);
  auto& v = store.add("v", random_matrix(4, 4, rng));
  ad::LossClosure<double> f = [&](ad::Tape<double>& t) {
    return ad::binary_cross_entropy_logit(bl::retain_forward(t.param(v), p, store).logit, true);
  };
  const auto r = ad::grad_check(f, store);
  report("RETAIN", r);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(GradCheck, SkipGramFiveTokens) {
  Rng rng(12);
  ad::ParameterStore<double> store;
  auto& in = store.add("in", random_matrix(5, 4, rng, 0.5));
  auto& out = store.add("out", random_matrix(5, 4, rng, 0.5));
  const std::vector<std::int32_t> centers = {0, 1, 2, 4}, contexts = {1, 2, 3, 0};
  const std::vector<std::int32_t> negatives = {2, 3, 0, 4, 1, 4, 3, 2};
  ad::LossClosure<double> f = [&](ad::Tape<double>& t) {
    return bl::skipgram_loss(t.param(in), t.param(out), centers, contexts, negatives);
  };
  ad::GradCheckOptions opt;
  opt.tolerance = 1e-5;
  const auto r = ad::grad_check(f, store, opt);
  report("skip-gram", r);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(SkipGram, ZeroTablesGiveLog2PositiveLoss) {
  ad::Tape<double> tape;
  auto in = tape.constant(ad::Tensor<double>({6, 3}, 0.0));
  auto out = tape.constant(ad::Tensor<double>({6, 3}, 0.0));
  auto loss = bl::skipgram_loss(in, out, {3, 4}, {4, 5}, {});
  EXPECT_NEAR(loss.item(), 0.6931, 1e-4);
}

TEST(SkipGram, PlantedCooccurrence) {
  // Codes 3 and 4 always share a patient (drawn from topic 6..12); code 5
  // never meets them and lives in topic 13..19.
  std::vector<ehr::ModelInput> corpus;
  Rng rng(5);
  for (int i = 0; i < 400; ++i) {
    const bool first = i % 2 == 0;
    const std::int32_t base = first ? 6 : 13;
    std::vector<std::int32_t> codes;
    if (first) codes = {3, 4};
    else codes = {5};
    for (int k = 0; k < 3; ++k) codes.push_back(base + static_cast<std::int32_t>(rng.uniform_int(7)));
    rng.shuffle(codes);
    corpus.push_back(make_input({codes}));
  }
  bl::SkipGramConfig cfg;
  cfg.dim = 16;
  cfg.steps = 600;
  cfg.seed = 3;
  const auto params = bl::train_skipgram(corpus, 20, cfg);
  auto cosine = [&](int a, int b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < 16; ++j) {
      dot += params.in.at(a, j) * params.in.at(b, j);
      na += params.in.at(a, j) * params.in.at(a, j);
      nb += params.in.at(b, j) * params.in.at(b, j);
    }
    return dot / std::sqrt(na * nb);
  };
  EXPECT_GT(cosine(3, 4), cosine(3, 5));
  // Deterministic by seed.
  const auto again = bl::train_skipgram(corpus, 20, cfg);
  EXPECT_EQ(again.in, params.in);
}

TEST(SkipGram, TinyVocabularyIsConfigError) {
  std::vector<ehr::ModelInput> corpus = {make_input({{3, 4, 5}})};
  bl::SkipGramConfig cfg;
  cfg.negatives = 5;
  EXPECT_THROW(bl::train_skipgram(corpus, 8, cfg), ehrbert::ConfigError);
}

TEST(SkipGram, CheckpointRoundTrip) {
  bl::SkipGramParams p;
  Rng rng(1);
  p.in = random_matrix(7, 3, rng).cast<float>();
  p.out = random_matrix(7, 3, rng).cast<float>();
  p.window = 5;
  p.negatives = 2;
  const std::string path = ::testing::TempDir() + "sg.ckpt";
  bl::save_skipgram(path, p);
  const auto q = bl::load_skipgram(path);
  EXPECT_EQ(q.in, p.in);
  EXPECT_EQ(q.out, p.out);
  EXPECT_EQ(q.window, 5u);
}

TEST(ModelSpec, LabelsRoundTrip) {
  const auto conds = bl::ex1_conditions();
  ASSERT_EQ(conds.size(), 10u);
  for (const auto& c : conds) EXPECT_EQ(bl::ModelSpec::parse(c.label()), c);
  EXPECT_THROW(bl::ModelSpec::parse("LSTM"), ehrbert::ConfigError);
  EXPECT_THROW((bl::ModelSpec{bl::Family::med_bert_only, bl::InputMode::none}.validate()), ehrbert::ConfigError);
}

class ComposeTest : public ::testing::Test {
 protected:
  ComposeTest() : bert(config(), 3) {
    Rng rng(4);
    sg.in = random_matrix(20, 32, rng).cast<float>();
    sg.out = sg.in;
  }
  static ehrbert::model::MedBertConfig config() {
    auto c = ehrbert::model::MedBertConfig::desk(20);
    c.dropout_rate = 0.0;
    return c;
  }
  ehrbert::model::MedBert<float> bert;
  bl::SkipGramParams sg;
  const ehr::ModelInput patient = make_input({{3, 4}, {5}, {6, 7, 8}});
};

TEST_F(ComposeTest, MedBertOutputLengthMatchesInput) {
  bl::PredictorConfig pc;
  pc.vocab_size = 20;
  bl::InputComposer<float> c(bl::InputMode::med_bert, pc, {&bert, nullptr}, 1);
  ad::Tape<float> tape;
  auto seq = c.compose(tape, patient.padded_to(10), false, nullptr);
  EXPECT_EQ(seq.shape(), (ad::Shape{6, 32}));
  // Same values as the pretrained encoder itself.
  ad::Tape<float> t2;
  EXPECT_EQ(seq.value(), bert.forward(t2, patient, false, nullptr).hidden.value());
}

TEST_F(ComposeTest, SkipGramModeStartsFromTrainedRows) {
  bl::PredictorConfig pc;
  pc.vocab_size = 20;
  bl::InputComposer<float> c(bl::InputMode::skipgram, pc, {nullptr, &sg}, 1);
  ad::Tape<float> tape;
  auto seq = c.compose(tape, patient, false, nullptr);
  for (std::size_t i = 0; i < patient.length; ++i)
    for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(seq.value().at(i, j), sg.in.at(patient.code_ids[i], j));
}

TEST_F(ComposeTest, MissingArtifactIsConfigError) {
  bl::PredictorConfig pc;
  pc.vocab_size = 20;
  EXPECT_THROW(bl::InputComposer<float>(bl::InputMode::med_bert, pc, {}, 1), ehrbert::ConfigError);
  EXPECT_THROW(bl::InputComposer<float>(bl::InputMode::skipgram, pc, {}, 1), ehrbert::ConfigError);
}

TEST_F(ComposeTest, RetainSeesOneRowPerVisit) {
  ad::Tape<float> tape;
  auto seq = tape.constant(ad::Tensor<float>({6, 2}, std::vector<float>{1, 0, 2, 0, 0, 5, 1, 1, 1, 2, 1, 3}));
  auto v = bl::visit_sums(seq, patient);
  EXPECT_EQ(v.shape(), (ad::Shape{3, 2}));
  EXPECT_EQ(v.value().values(), (std::vector<float>{3, 0, 0, 5, 3, 6}));
}

TEST_F(ComposeTest, EveryConditionProducesAScalarLogit) {
  bl::PredictorConfig pc;
  pc.vocab_size = 20;
  for (const auto& spec : bl::ex1_conditions()) {
    bl::Predictor<float> p(spec, pc, {&bert, &sg}, 7);
    ad::Tape<float> tape;
    Rng rng(1);
    auto z = p.logit(tape, patient, true, &rng);
    EXPECT_EQ(z.size(), 1u) << spec.label();
    ad::backward(tape, ad::binary_cross_entropy_logit(z, true));
    EXPECT_NO_THROW(bl::multi_store_step(p.stores(), ad::AdamWConfig{})) << spec.label();
  }
}

TEST_F(ComposeTest, FrozenEncoderKeepsWeights) {
  bl::PredictorConfig pc;
  pc.vocab_size = 20;
  pc.freeze_encoder = true;
  bl::Predictor<float> p({bl::Family::gru, bl::InputMode::med_bert}, pc, {&bert, nullptr}, 7);
  const auto before = p.composer().med_bert()->store().snapshot();
  ad::Tape<float> tape;
  ad::backward(tape, ad::binary_cross_entropy_logit(p.logit(tape, patient, false, nullptr), true));
  bl::multi_store_step(p.stores(), ad::AdamWConfig{});
  EXPECT_EQ(p.composer().med_bert()->store().snapshot(), before);
}
