// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "ehrbert/autodiff/adamw.hpp"
#include "ehrbert/autodiff/checkpoint.hpp"
#include "ehrbert/autodiff/grad_check.hpp"
#include "ehrbert/autodiff/ops.hpp"

namespace ad = ehrbert::ad;
using ehrbert::Rng;

namespace {

ad::Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  ad::Tensor<double> t({r, c});
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST(Ops, SoftmaxOfZerosIsUniform) {
  ad::Tape<double> tape;
  auto x = tape.constant(ad::Tensor<double>({1, 2}, 0.0));
  auto y = ad::softmax(x);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Ops, SoftmaxRowsSumToOneOnBothAxes) {
  Rng rng(3);
  ad::Tape<double> tape;
  auto x = tape.constant(random_matrix(5, 7, rng, 10.0));
  for (int axis : {0, 1}) {
    auto y = ad::softmax(x, axis).value();
    const std::size_t lines = axis == 1 ? 5 : 7;
    for (std::size_t l = 0; l < lines; ++l) {
      double s = 0;
      for (std::size_t e = 0; e < (axis == 1 ? 7u : 5u); ++e) {
        const double v = axis == 1 ? y.at(l, e) : y.at(e, l);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Ops, LayerNormOfConstantRowIsZeroBeforeAffine) {
  ad::Tape<double> tape;
  auto x = tape.constant(ad::Tensor<double>({1, 6}, 3.25));
  auto g = tape.constant(ad::Tensor<double>({6}, 1.0));
  auto b = tape.constant(ad::Tensor<double>({6}, 0.0));
  auto y = ad::layer_norm(x, g, b, 1e-12);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Ops, LayerNormNormalisesRows) {
  Rng rng(5);
  ad::Tape<double> tape;
  auto x = tape.constant(random_matrix(3, 8, rng, 4.0));
  auto y = ad::layer_norm(x, tape.constant(ad::Tensor<double>({8}, 1.0)),
                          tape.constant(ad::Tensor<double>({8}, 0.0)), 1e-12)
               .value();
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0, sq = 0;
    for (std::size_t j = 0; j < 8; ++j) mean += y.at(i, j);
    mean /= 8;
    for (std::size_t j = 0; j < 8; ++j) sq += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / 8, 1.0, 1e-9);
  }
}

TEST(Ops, CrossEntropyOfUniformLogitsIsLogV) {
  ad::Tape<double> tape;
  auto logits = tape.constant(ad::Tensor<double>({1, 4}, 0.0));
  const std::int32_t target = 2;
  auto loss = ad::cross_entropy_logits(logits, std::span<const std::int32_t>(&target, 1));
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(loss.item(), 1.3863, 1e-4);
}

TEST(Ops, BinaryCrossEntropyAtZeroLogitIsLog2) {
  ad::Tape<double> tape;
  auto z = tape.constant(ad::Tensor<double>({1, 1}, 0.0));
  EXPECT_NEAR(ad::binary_cross_entropy_logit(z, true).item(), std::numbers::ln2, 1e-15);
  EXPECT_NEAR(ad::binary_cross_entropy_logit(z, false).item(), std::numbers::ln2, 1e-15);
}

TEST(Ops, BinaryCrossEntropyIsStableForLargeLogits) {
  ad::Tape<double> tape;
  auto z = tape.constant(ad::Tensor<double>({1, 1}, 800.0));
  EXPECT_NEAR(ad::binary_cross_entropy_logit(z, false).item(), 800.0, 1e-9);
  EXPECT_NEAR(ad::binary_cross_entropy_logit(z, true).item(), 0.0, 1e-12);
}

TEST(Ops, DropoutEvalIsIdentity) {
  Rng rng(1);
  ad::Tape<double> tape;
  auto x = tape.constant(random_matrix(4, 4, rng));
  auto y = ad::dropout(x, 0.5, false, rng);
  EXPECT_EQ(y.index(), x.index());
}

TEST(Ops, DropoutTrainPreservesExpectation) {
  Rng rng(11);
  ad::Tape<double> tape;
  auto x = tape.constant(ad::Tensor<double>({1, 10}, 1.0));
  double total = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    auto y = ad::dropout(x, 0.1, true, rng);
    for (double v : y.value().values()) total += v;
  }
  const double mean = total / (trials * 10.0);
  EXPECT_NEAR(mean, 1.0, 0.02);
}

TEST(Ops, DropoutRejectsBadRate) {
  Rng rng(1);
  ad::Tape<double> tape;
  auto x = tape.constant(ad::Tensor<double>({1, 2}, 1.0));
  EXPECT_THROW(ad::dropout(x, 1.0, true, rng), ehrbert::ContractError);
}

TEST(Ops, ShapeErrorsNameBothShapes) {
  ad::Tape<double> tape;
  auto a = tape.constant(ad::Tensor<double>({2, 3}, 1.0));
  auto b = tape.constant(ad::Tensor<double>({2, 3}, 1.0));
  try {
    ad::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ehrbert::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
  EXPECT_THROW(ad::add(a, tape.constant(ad::Tensor<double>({3, 2}, 1.0))), ehrbert::ShapeError);
}

TEST(Ops, NonFiniteResultRaisesNumericsError) {
  ad::Tape<double> tape;
  auto a = tape.constant(ad::Tensor<double>({1, 1}, 1e300));
  EXPECT_THROW(ad::mul(a, a), ehrbert::NumericsError);
}

TEST(Ops, EmbeddingLookupOutOfRange) {
  ad::Tape<double> tape;
  auto table = tape.constant(ad::Tensor<double>({3, 2}, 1.0));
  const std::int32_t ids[] = {0, 3};
  EXPECT_THROW(ad::embedding_lookup(table, std::span<const std::int32_t>(ids)), ehrbert::VocabRangeError);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(2);
  ad::Tape<double> tape;
  auto x = tape.variable(random_matrix(3, 4, rng));
  tape.backward(ad::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, DotProductSwapsOperands) {
  ad::Tape<double> tape;
  auto x = tape.variable(ad::Tensor<double>({1, 3}, std::vector<double>{1, 2, 3}));
  auto y = tape.variable(ad::Tensor<double>({1, 3}, std::vector<double>{-4, 5, 0.5}));
  tape.backward(ad::sum(ad::mul(x, y)));
  EXPECT_EQ(x.grad(), y.value().values());
  EXPECT_EQ(y.grad(), x.value().values());
}

TEST(Backward, TwoConsumersAccumulate) {
  // loss = sum(3*x) + sum(x*x) -> dloss/dx = 3 + 2x
  ad::Tape<double> tape;
  auto x = tape.variable(ad::Tensor<double>({1, 3}, std::vector<double>{1, -2, 0.5}));
  auto loss = ad::add(ad::sum(ad::affine(x, 3.0)), ad::sum(ad::mul(x, x)));
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -1.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 4.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  ad::Tape<double> tape;
  auto x = tape.variable(ad::Tensor<double>({2, 2}, 1.0));
  EXPECT_THROW(tape.backward(x), ehrbert::ContractError);
}

TEST(Backward, ParameterUsedTwiceSharesOneNode) {
  ad::ParameterStore<double> store;
  auto& p = store.add("w", ad::Tensor<double>({1, 2}, std::vector<double>{2, 3}));
  ad::Tape<double> tape;
  auto a = tape.param(p);
  auto b = tape.param(p);
  EXPECT_EQ(a.index(), b.index());
  ad::backward(tape, ad::sum(ad::mul(a, b)));
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad[1], 6.0);
}

// Each op's backward rule against central differences.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  Rng rng(100 + GetParam());
  ad::ParameterStore<double> store;
  auto& a = store.add("a", random_matrix(3, 4, rng));
  auto& b = store.add("b", random_matrix(4, 5, rng));
  auto& c = store.add("c", random_matrix(3, 4, rng));
  auto& row = store.add("row", random_matrix(1, 4, rng));
  auto& table = store.add("table", random_matrix(6, 4, rng));
  const std::int32_t ids[] = {2, 0, 2, 5};
  const std::int32_t targets[] = {1, 3, 0};
  const double labels[] = {1, 0, 1};
  const int which = GetParam();
  ad::LossClosure<double> f = [&](ad::Tape<double>& t) -> ad::Var<double> {
    auto A = t.param(a), B = t.param(b), C = t.param(c), R = t.param(row), W = t.param(table);
    auto weigh = [&](ad::Var<double> v) {
      // Sum of v elementwise-multiplied by fixed pseudo-random weights, so
      // that every output entry influences the loss differently.
      ad::Tensor<double> w(ad::Shape{v.rows(), v.cols()});
      for (std::size_t e = 0; e < w.size(); ++e) w[e] = std::sin(1.0 + 0.7 * static_cast<double>(e));
      return ad::sum(ad::mul(v, t.constant(w)));
    };
    switch (which) {
      case 0: return weigh(ad::matmul(A, B));
      case 1: return weigh(ad::matmul_nt(A, C));
      case 2: return weigh(ad::add(A, R));
      case 3: return weigh(ad::sub(A, C));
      case 4: return weigh(ad::mul(A, R));
      case 5: return weigh(ad::softmax(A, 1));
      case 6: return weigh(ad::softmax(A, 0));
      case 7: return weigh(ad::layer_norm(A, R, ad::slice_rows(C, 0, 1), 1e-12));
      case 8: return weigh(ad::gelu(A));
      case 9: return weigh(ad::tanh(A));
      case 10: return weigh(ad::sigmoid(A));
      case 11: return weigh(ad::mean(A, 0));
      case 12: return weigh(ad::mean(A, 1));
      case 13: return weigh(ad::mean_rows(A, 2));
      case 14: return weigh(ad::embedding_lookup(W, std::span<const std::int32_t>(ids)));
      case 15: return weigh(ad::slice_cols(A, 1, 2));
      case 16: return weigh(ad::concat_cols<double>({A, C, A}));
      case 17: return weigh(ad::concat_rows<double>({A, R}));
      case 18: return weigh(ad::transpose(A));
      case 19: return ad::cross_entropy_logits(A, std::span<const std::int32_t>(targets));
      case 20: return ad::binary_cross_entropy_logit(ad::slice_cols(A, 0, 1), std::span<const double>(labels));
      case 21: return weigh(ad::sum(A, 1));
      default: return weigh(ad::affine(ad::one_minus(A), 2.5, 1.0));
    }
  };
  ad::GradCheckOptions opt;
  opt.tolerance = 1e-6;
  const auto report = ad::grad_check(f, store, opt);
  EXPECT_TRUE(report.passed) << "op " << which << " max rel error " << report.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 23));

TEST(AdamW, ZeroGradientOnlyDecays) {
  ad::ParameterStore<double> store;
  auto& p = store.add("p", ad::Tensor<double>({1, 3}, std::vector<double>{1.0, -2.0, 4.0}));
  p.accumulate_grad(std::vector<double>(3, 0.0));
  ad::AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  ad::adamw_step(store, cfg);
  EXPECT_DOUBLE_EQ(p.value[0], 1.0 * (1 - 0.001));
  EXPECT_DOUBLE_EQ(p.value[1], -2.0 * (1 - 0.001));
  EXPECT_DOUBLE_EQ(p.value[2], 4.0 * (1 - 0.001));
  EXPECT_EQ(store.step, 1u);
  EXPECT_FALSE(p.has_grad);
}

TEST(AdamW, ConstantGradientMovesMonotonically) {
  ad::ParameterStore<double> store;
  auto& p = store.add("p", ad::Tensor<double>({1, 2}, std::vector<double>{0.0, 0.0}));
  ad::AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  double prev0 = 0.0, prev1 = 0.0;
  for (int s = 0; s < 50; ++s) {
    p.accumulate_grad({0.7, -0.3});
    ad::adamw_step(store, cfg);
    EXPECT_LT(p.value[0], prev0);
    EXPECT_GT(p.value[1], prev1);
    prev0 = p.value[0];
    prev1 = p.value[1];
  }
}

TEST(AdamW, ConvergesOnQuadratic) {
  ad::ParameterStore<double> store;
  auto& p = store.add("p", ad::Tensor<double>({1, 1}, 0.0));
  ad::AdamWConfig cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0.0;
  for (int s = 0; s < 5000; ++s) {
    ad::Tape<double> tape;
    auto x = tape.param(p);
    auto d = ad::affine(x, 1.0, -3.0);
    ad::backward(tape, ad::sum(ad::mul(d, d)));
    ad::adamw_step(store, cfg);
  }
  EXPECT_NEAR(p.value[0], 3.0, 1e-3);
}

TEST(AdamW, ZeroDecayMatchesReferenceAdam) {
  Rng rng(9);
  ad::ParameterStore<double> store;
  auto& p = store.add("p", random_matrix(2, 3, rng));
  std::vector<double> ref = p.value.values(), m(6, 0.0), v(6, 0.0);
  ad::AdamWConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;
  for (int step = 1; step <= 20; ++step) {
    std::vector<double> g(6);
    for (auto& x : g) x = rng.normal();
    p.accumulate_grad(g);
    ad::adamw_step(store, cfg);
    // Textbook Adam with the same operation order.
    const double c1 = 1.0 / (1.0 - std::pow(cfg.beta1, step)), c2 = 1.0 / (1.0 - std::pow(cfg.beta2, step));
    for (int e = 0; e < 6; ++e) {
      m[e] = cfg.beta1 * m[e] + (1 - cfg.beta1) * g[e];
      v[e] = cfg.beta2 * v[e] + (1 - cfg.beta2) * g[e] * g[e];
      ref[e] -= cfg.lr * (m[e] * c1) / (std::sqrt(v[e] * c2) + cfg.eps);
    }
    EXPECT_EQ(p.value.values(), ref) << "step " << step;
  }
}

TEST(AdamW, MissingGradientsIsContractError) {
  ad::ParameterStore<double> store;
  store.add("p", ad::Tensor<double>({1, 1}, 1.0));
  EXPECT_THROW(ad::adamw_step(store, ad::AdamWConfig{}), ehrbert::ContractError);
}

TEST(GradCheck, LinearRegressionPassesTight) {
  Rng rng(21);
  ad::ParameterStore<double> store;
  auto& w = store.add("w", random_matrix(4, 1, rng));
  auto& b = store.add("b", ad::Tensor<double>({1, 1}, 0.3));
  const auto X = random_matrix(10, 4, rng);
  const auto y = random_matrix(10, 1, rng);
  ad::LossClosure<double> f = [&](ad::Tape<double>& t) {
    auto pred = ad::add(ad::matmul(t.constant(X), t.param(w)), t.param(b));
    auto r = ad::sub(pred, t.constant(y));
    return ad::mean(ad::mean(ad::mul(r, r), 0), 1);
  };
  ad::GradCheckOptions opt;
  opt.tolerance = 1e-6;
  const auto report = ad::grad_check(f, store, opt);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_EQ(report.params.size(), 2u);
}

TEST(GradCheck, DropoutClosureIsRejected) {
  Rng rng(1);
  ad::ParameterStore<double> store;
  auto& w = store.add("w", random_matrix(1, 8, rng));
  Rng dropout_rng(7);
  ad::LossClosure<double> f = [&](ad::Tape<double>& t) {
    return ad::sum(ad::dropout(t.param(w), 0.5, true, dropout_rng));
  };
  EXPECT_THROW(ad::grad_check(f, store), ehrbert::ContractError);
}

TEST(Checkpoint, RoundTripsByteIdentically) {
  Rng rng(4);
  ad::ParameterStore<float> store;
  store.add_normal("enc.w", {3, 5}, rng);
  store.add_constant("enc.ln.gain", {5}, 1.0f);
  store.at(0).accumulate_grad(std::vector<float>(15, 0.5f));
  ad::adamw_step(store, ad::AdamWConfig{});
  const nlohmann::json cfg = {{"hidden_dim", 5}, {"note", "x"}};
  std::stringstream first;
  ad::save_checkpoint(first, store, "test", cfg);

  const auto data = ad::read_checkpoint(first);
  EXPECT_EQ(data.header.type, "test");
  EXPECT_EQ(data.header.config, cfg);
  ad::ParameterStore<float> other;
  other.add("enc.w", ad::Tensor<float>({3, 5}));
  other.add("enc.ln.gain", ad::Tensor<float>({5}));
  ad::load_into(data, other);
  std::stringstream second;
  ad::save_checkpoint(second, other, "test", cfg);
  EXPECT_EQ(first.str(), second.str());
  EXPECT_EQ(other.step, 1u);
  EXPECT_EQ(other.get("enc.w").value, store.get("enc.w").value);
}

TEST(Checkpoint, ShapeMismatchIsConfigError) {
  ad::ParameterStore<double> store;
  store.add("w", ad::Tensor<double>({2, 2}, 1.0));
  std::stringstream ss;
  ad::save_checkpoint(ss, store, "t", nlohmann::json::object());
  const auto data = ad::read_checkpoint(ss);
  ad::ParameterStore<double> other;
  other.add("w", ad::Tensor<double>({2, 3}, 1.0));
  EXPECT_THROW(ad::load_into(data, other), ehrbert::ConfigError);
}

TEST(Checkpoint, BadMagicIsIoError) {
  std::stringstream ss("NOTACKPT....");
  EXPECT_THROW(ad::read_checkpoint(ss), ehrbert::IoError);
}
