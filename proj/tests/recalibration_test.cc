// Copyright 2026 The PCSR Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <functional>
#include <vector>

#include <gtest/gtest.h>

#include "pcsr/error.h"
#include "pcsr/optim.h"
#include "pcsr/recalibration.h"
#include "oracles.h"
#include "test_util.h"

namespace pcsr {
namespace {

using testing::RandomPcsr;
using testing::RandomTensor;
using testing::TempDir;
using DTensor = BasicTensor<double>;

using testing::NaiveAttention;
using testing::NaiveCosine;
using testing::NaiveSimilarityLoss;

PcsrLayerParams<double>& Layer0(BasicPcsrParams<double>& p) { return p.ForLayer(0); }

// --- domain separation and domain token -------------------------------------

TEST(DsnTest, IdentityPassesThrough) {
  auto p = InitPcsr<double>({}, 4, 1);
  Tape<double> tape;
  SplitMix64 rng(1);
  const DTensor x = RandomTensor<double>({2, 3, 4}, rng);
  auto f = DsnFeatures(tape.Constant(x), Layer0(p));
  EXPECT_EQ(f.value(), x);
}

TEST(DsnTest, ZeroWeightGivesBias) {
  auto p = InitPcsr<double>({}, 3, 1);
  Layer0(p).dsn_weight.value.Fill(0);
  Layer0(p).dsn_bias.value = DTensor({3}, {0.5, -1, 2});
  Tape<double> tape;
  SplitMix64 rng(2);
  auto f = DsnFeatures(tape.Constant(RandomTensor<double>({2, 4, 3}, rng)), Layer0(p));
  for (std::int64_t s = 0; s < 2; ++s) {
    for (std::int64_t j = 0; j < 4; ++j) {
      EXPECT_EQ(f.value().at({s, j, 0}), 0.5);
      EXPECT_EQ(f.value().at({s, j, 1}), -1.0);
      EXPECT_EQ(f.value().at({s, j, 2}), 2.0);
    }
  }
}

TEST(DsnTest, RejectsWrongWidth) {
  auto p = InitPcsr<double>({}, 4, 1);
  Tape<double> tape;
  EXPECT_THROW(DsnFeatures(tape.Constant(DTensor({1, 2, 3})), Layer0(p)), ShapeError);
}

TEST(DsnTest, SimilarityLossGradientOnRandomPhi) {
  auto p = RandomPcsr<double>({}, 5, 1, 3, 0.5);
  SplitMix64 rng(3);
  const DTensor x = RandomTensor<double>({2, 4, 5}, rng);
  auto& layer = Layer0(p);
  layer.fgn_weight.requires_grad = false;
  layer.fgn_bias.requires_grad = false;
  const std::function<Var<double>(Tape<double>&)> loss = [&](Tape<double>& t) {
    std::vector<Var<double>> m = {SimilarityMatrix(DsnFeatures(t.Constant(x), layer))};
    return SimilarityLoss<double>(m);
  };
  const auto r = GradCheck<double>(
      loss, {{"dsn.weight", &layer.dsn_weight}, {"dsn.bias", &layer.dsn_bias}});
  EXPECT_EQ(r.coords_checked, 30);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(DomainTokenTest, SingleTokenIsItself) {
  Tape<double> tape;
  const DTensor f({1, 1, 3}, {1, -2, 3});
  for (auto agg : {Aggregation::kAvg, Aggregation::kMax}) {
    auto d = DomainToken(tape.Constant(f), agg);
    EXPECT_EQ(d.value(), DTensor({1, 3}, {1, -2, 3}));
  }
}

TEST(DomainTokenTest, AverageAndMax) {
  Tape<double> tape;
  const DTensor f({1, 2, 2}, {0, 2, 2, 0});
  EXPECT_EQ(DomainToken(tape.Constant(f), Aggregation::kAvg).value(), DTensor({1, 2}, {1, 1}));
  EXPECT_EQ(DomainToken(tape.Constant(f), Aggregation::kMax).value(), DTensor({1, 2}, {2, 2}));
}

TEST(DomainTokenTest, RequiresTokenAxis) {
  Tape<double> tape;
  EXPECT_THROW(DomainToken(tape.Constant(DTensor({2, 3})), Aggregation::kAvg), ContractError);
}

// --- similarity --------------------------------------------------------------

double PairSimilarity(std::vector<double> a, std::vector<double> b) {
  Tape<double> tape;
  std::vector<double> data = a;
  data.insert(data.end(), b.begin(), b.end());
  const auto d = static_cast<std::int64_t>(a.size());
  return SimilarityMatrix(tape.Constant(DTensor({1, 2, d}, data))).value().at({0, 0, 1});
}

TEST(SimilarityTest, ClosedForms) {
  EXPECT_NEAR(PairSimilarity({3, 4}, {3, 4}), 1.0, 1e-15);
  EXPECT_NEAR(PairSimilarity({1, 0}, {0, 1}), 0.0, 1e-15);
  // (3*4 + 4*3) / (5 * 5)
  EXPECT_NEAR(PairSimilarity({3, 4}, {4, 3}), 24.0 / 25.0, 1e-15);
}

TEST(SimilarityTest, ZeroNormFeatureIsCountedNotNan) {
  Tape<double> tape;
  std::int64_t degenerate = 0;
  auto m = SimilarityMatrix(tape.Constant(DTensor({1, 2, 2}, {0, 0, 1, 1})), &degenerate);
  EXPECT_GT(degenerate, 0);
  EXPECT_EQ(m.value().at({0, 0, 1}), 0.0);
  EXPECT_EQ(m.value().at({0, 1, 0}), 0.0);
  EXPECT_EQ(m.value().at({0, 0, 0}), 0.0);
  EXPECT_NEAR(m.value().at({0, 1, 1}), 1.0, 1e-15);
  EXPECT_TRUE(m.value().AllFinite());
}

TEST(SimilarityTest, SymmetricUnitDiagonalBounded) {
  Tape<double> tape;
  SplitMix64 rng(4);
  auto m = SimilarityMatrix(tape.Constant(RandomTensor<double>({3, 6, 5}, rng))).value();
  for (int s = 0; s < 3; ++s) {
    for (int j = 0; j < 6; ++j) {
      EXPECT_NEAR(m.at({s, j, j}), 1.0, 1e-12);
      for (int k = 0; k < 6; ++k) {
        EXPECT_EQ(m.at({s, j, k}), m.at({s, k, j}));
        EXPECT_LE(std::abs(m.at({s, j, k})), 1.0 + 1e-12);
      }
    }
  }
}

TEST(SimilarityTest, MatchesNaiveLoops) {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto b = 1 + static_cast<std::int64_t>(rng.Below(3));
    const auto n = 1 + static_cast<std::int64_t>(rng.Below(6));
    const auto d = 1 + static_cast<std::int64_t>(rng.Below(6));
    const DTensor f = RandomTensor<double>({b, n, d}, rng);
    Tape<double> tape;
    const auto m = SimilarityMatrix(tape.Constant(f)).value();
    const auto want = NaiveCosine(f);
    for (std::int64_t i = 0; i < m.numel(); ++i) {
      ASSERT_NEAR(m[i], want[static_cast<size_t>(i)], 1e-6) << "trial " << trial;
    }
  }
}

TEST(SimilarityLossTest, AllEqualFeaturesGiveMinusOne) {
  Tape<double> tape;
  const DTensor f({2, 3, 2}, {1, 2, 1, 2, 1, 2, -3, 1, -3, 1, -3, 1});
  std::vector<Var<double>> m = {SimilarityMatrix(tape.Constant(f)),
                                SimilarityMatrix(tape.Constant(f))};
  EXPECT_NEAR(SimilarityLoss<double>(m).value().item(), -1.0, 1e-12);
}

TEST(SimilarityLossTest, OrthogonalPair) {
  Tape<double> tape;
  std::vector<Var<double>> m = {SimilarityMatrix(tape.Constant(DTensor({1, 2, 2}, {1, 0, 0, 1})))};
  EXPECT_NEAR(SimilarityLoss<double>(m).value().item(), -0.5, 1e-15);
}

TEST(SimilarityLossTest, MatchesNaiveLoops) {
  SplitMix64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto layers = 1 + static_cast<int>(rng.Below(4));
    const auto b = 1 + static_cast<std::int64_t>(rng.Below(3));
    const auto n = 1 + static_cast<std::int64_t>(rng.Below(5));
    const auto d = 2 + static_cast<std::int64_t>(rng.Below(4));
    std::vector<DTensor> fs;
    Tape<double> tape;
    std::vector<Var<double>> m;
    for (int l = 0; l < layers; ++l) {
      fs.push_back(RandomTensor<double>({b, n, d}, rng));
      m.push_back(SimilarityMatrix(tape.Constant(fs.back())));
    }
    const double got = SimilarityLoss<double>(m).value().item();
    ASSERT_NEAR(got, NaiveSimilarityLoss(fs), 1e-6) << "trial " << trial;
    ASSERT_GE(got, -1.0 - 1e-12);
    ASSERT_LE(got, 1.0 + 1e-12);
  }
}

TEST(SimilarityLossTest, RejectsNoLayers) {
  std::vector<Var<double>> none;
  EXPECT_THROW(SimilarityLoss<double>(none), ContractError);
}

// --- factor generation -------------------------------------------------------

TEST(FactorTest, IdentityInitForAnyInput) {
  for (auto sharing : {FactorSharing::kShared, FactorSharing::kIndependent}) {
    PcsrConfig c;
    c.factor_sharing = sharing;
    auto p = InitPcsr<double>(c, 4, 1);
    SplitMix64 rng(7);
    Tape<double> tape;
    auto f = GenerateFactors(tape.Constant(RandomTensor<double>({3, 4}, rng, 50.0)),
                             Layer0(p), sharing);
    for (const auto* v : {&f.gamma_q, &f.gamma_k, &f.gamma_v}) {
      for (double x : v->value().data()) EXPECT_EQ(x, 1.0);
    }
    for (const auto* v : {&f.beta_q, &f.beta_k, &f.beta_v}) {
      for (double x : v->value().data()) EXPECT_EQ(x, 0.0);
    }
  }
}

TEST(FactorTest, HandComputedLinearMap) {
  auto p = InitPcsr<double>({}, 2, 1);
  // Stored [in, out]: out_j = sum_i x_i * W[i, j].
  Layer0(p).fgn_weight.value = DTensor({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  Layer0(p).fgn_bias.value = DTensor({4}, {0, 0, 0, 0});
  Tape<double> tape;
  auto f = GenerateFactors(tape.Constant(DTensor({1, 2}, {1, 1})), Layer0(p),
                           FactorSharing::kShared);
  EXPECT_EQ(f.gamma_q.value(), DTensor({1, 2}, {6, 8}));
  EXPECT_EQ(f.beta_q.value(), DTensor({1, 2}, {10, 12}));
}

TEST(FactorTest, IndependentLayout) {
  PcsrConfig c;
  c.factor_sharing = FactorSharing::kIndependent;
  auto p = InitPcsr<double>(c, 1, 1);
  ASSERT_EQ(Layer0(p).fgn_weight.value.dims(), (Shape{1, 6}));
  Layer0(p).fgn_bias.value = DTensor({6}, {1, 2, 3, 4, 5, 6});
  Tape<double> tape;
  auto f = GenerateFactors(tape.Constant(DTensor({1, 1}, {0})), Layer0(p),
                           FactorSharing::kIndependent);
  EXPECT_EQ(f.gamma_q.value().item(), 1);
  EXPECT_EQ(f.beta_q.value().item(), 2);
  EXPECT_EQ(f.gamma_k.value().item(), 3);
  EXPECT_EQ(f.beta_k.value().item(), 4);
  EXPECT_EQ(f.gamma_v.value().item(), 5);
  EXPECT_EQ(f.beta_v.value().item(), 6);
}

TEST(FactorTest, WrongSharingLayoutIsShapeError) {
  auto p = InitPcsr<double>({}, 2, 1);
  Tape<double> tape;
  EXPECT_THROW(GenerateFactors(tape.Constant(DTensor({1, 2})), Layer0(p),
                               FactorSharing::kIndependent),
               ShapeError);
}

TEST(ConditioningTest, Modes) {
  SplitMix64 rng(8);
  Tape<double> tape;
  auto domain = tape.Constant(RandomTensor<double>({2, 3}, rng));
  auto cls = tape.Constant(RandomTensor<double>({2, 3}, rng));
  const DTensor patches_t = RandomTensor<double>({2, 4, 3}, rng);
  auto patches = tape.Constant(patches_t);

  auto both = ConditioningInput(Conditioning::kBoth, domain, cls, patches).value();
  for (std::int64_t i = 0; i < 6; ++i) {
    EXPECT_DOUBLE_EQ(both[i], domain.value()[i] + cls.value()[i]);
  }
  EXPECT_EQ(ConditioningInput(Conditioning::kClassOnly, domain, cls, patches).value(),
            cls.value());
  EXPECT_EQ(ConditioningInput(Conditioning::kDomainOnly, domain, cls, patches).value(),
            domain.value());
  auto mean = ConditioningInput(Conditioning::kMeanToken, domain, cls, patches).value();
  for (int s = 0; s < 2; ++s) {
    for (int c = 0; c < 3; ++c) {
      double m = 0;
      for (int j = 0; j < 4; ++j) m += patches_t.at({s, j, c});
      EXPECT_NEAR(mean.at({s, c}), m / 4, 1e-15);
    }
  }
}

TEST(ConditioningTest, BothWithZeroClassEqualsDomainOnly) {
  auto p = RandomPcsr<double>({}, 3, 1, 9);
  SplitMix64 rng(9);
  Tape<double> tape;
  auto domain = tape.Constant(RandomTensor<double>({2, 3}, rng));
  auto zero = tape.Constant(DTensor({2, 3}));
  auto patches = tape.Constant(DTensor({2, 1, 3}));
  auto a = GenerateFactors(ConditioningInput(Conditioning::kBoth, domain, zero, patches),
                           Layer0(p), FactorSharing::kShared);
  auto b = GenerateFactors(ConditioningInput(Conditioning::kDomainOnly, domain, zero, patches),
                           Layer0(p), FactorSharing::kShared);
  EXPECT_EQ(a.gamma_q.value(), b.gamma_q.value());
  EXPECT_EQ(a.beta_q.value(), b.beta_q.value());
}

TEST(ConfigNamesTest, ParseRoundTrip) {
  for (auto c : {Conditioning::kBoth, Conditioning::kClassOnly, Conditioning::kDomainOnly,
                 Conditioning::kMeanToken}) {
    EXPECT_EQ(ParseConditioning(ToString(c)), c);
  }
  for (auto a : {Aggregation::kAvg, Aggregation::kMax}) EXPECT_EQ(ParseAggregation(ToString(a)), a);
  for (auto s : {FactorSharing::kShared, FactorSharing::kIndependent}) {
    EXPECT_EQ(ParseFactorSharing(ToString(s)), s);
  }
  for (auto l : {LayerSharing::kPerLayer, LayerSharing::kAcrossLayers}) {
    EXPECT_EQ(ParseLayerSharing(ToString(l)), l);
  }
  EXPECT_THROW(ParseConditioning("concat"), ConfigError);
}

// --- recalibration and attention ---------------------------------------------

Qkv<double> RandomQkv(SplitMix64& rng, std::int64_t b, std::int64_t t, std::int64_t d,
                      Tape<double>& tape) {
  return {tape.Constant(RandomTensor<double>({b, t, d}, rng)),
          tape.Constant(RandomTensor<double>({b, t, d}, rng)),
          tape.Constant(RandomTensor<double>({b, t, d}, rng))};
}

Factors<double> ConstantFactors(Tape<double>& tape, std::int64_t b, std::int64_t d,
                                double gamma, double beta) {
  Factors<double> f;
  f.gamma_q = f.gamma_k = f.gamma_v = tape.Constant(DTensor::Full({b, d}, gamma));
  f.beta_q = f.beta_k = f.beta_v = tape.Constant(DTensor::Full({b, d}, beta));
  return f;
}

TEST(RecalibrateTest, IdentityFactorsLeaveQkv) {
  SplitMix64 rng(10);
  Tape<double> tape;
  auto qkv = RandomQkv(rng, 2, 3, 4, tape);
  auto out = RecalibrateQkv(qkv, ConstantFactors(tape, 2, 4, 1, 0));
  EXPECT_EQ(out.q.value(), qkv.q.value());
  EXPECT_EQ(out.k.value(), qkv.k.value());
  EXPECT_EQ(out.v.value(), qkv.v.value());
}

TEST(RecalibrateTest, AffineArithmetic) {
  Tape<double> tape;
  auto x = tape.Constant(DTensor::Full({1, 1, 2}, 0.5));
  auto out = RecalibrateQkv({x, x, x}, ConstantFactors(tape, 1, 2, 2, 1));
  for (double v : out.q.value().data()) EXPECT_EQ(v, 2.0);
}

TEST(RecalibrateTest, SharedFactorsKeepEqualQk) {
  SplitMix64 rng(11);
  auto p = RandomPcsr<double>({}, 4, 1, 11);
  Tape<double> tape;
  auto qk = tape.Constant(RandomTensor<double>({2, 3, 4}, rng));
  auto v = tape.Constant(RandomTensor<double>({2, 3, 4}, rng));
  auto f = GenerateFactors(tape.Constant(RandomTensor<double>({2, 4}, rng)), Layer0(p),
                           FactorSharing::kShared);
  auto out = RecalibrateQkv({qk, qk, v}, f);
  EXPECT_EQ(out.q.value(), out.k.value());
}

TEST(RecalibrateTest, PerSampleBroadcastOverTokens) {
  Tape<double> tape;
  auto x = tape.Constant(DTensor({2, 2, 1}, {1, 2, 3, 4}));
  Factors<double> f;
  f.gamma_q = f.gamma_k = f.gamma_v = tape.Constant(DTensor({2, 1}, {10, 100}));
  f.beta_q = f.beta_k = f.beta_v = tape.Constant(DTensor({2, 1}, {1, -1}));
  auto out = RecalibrateQkv({x, x, x}, f);
  EXPECT_EQ(out.v.value(), DTensor({2, 2, 1}, {11, 21, 299, 399}));
}

TEST(AttentionTest, SingleTokenReturnsValue) {
  SplitMix64 rng(12);
  Tape<double> tape;
  auto qkv = RandomQkv(rng, 3, 1, 4, tape);
  auto out = RecalibratedAttention(qkv, 2);
  for (std::int64_t i = 0; i < out.value().numel(); ++i) {
    EXPECT_NEAR(out.value()[i], qkv.v.value()[i], 1e-6);
  }
}

TEST(AttentionTest, IdenticalKeysGiveUniformWeights) {
  SplitMix64 rng(13);
  Tape<double> tape;
  DTensor k({1, 4, 4});
  const DTensor row = RandomTensor<double>({4}, rng);
  for (int j = 0; j < 4; ++j) {
    for (int c = 0; c < 4; ++c) k.at({0, j, c}) = row[c];
  }
  Qkv<double> qkv{tape.Constant(RandomTensor<double>({1, 4, 4}, rng)), tape.Constant(k),
                  tape.Constant(RandomTensor<double>({1, 4, 4}, rng))};
  Var<double> probs;
  auto out = RecalibratedAttention(qkv, 2, &probs);
  for (double p : probs.value().data()) EXPECT_NEAR(p, 0.25, 1e-12);
  for (int i = 0; i < 4; ++i) {
    for (int c = 0; c < 4; ++c) {
      double mean = 0;
      for (int j = 0; j < 4; ++j) mean += qkv.v.value().at({0, j, c});
      EXPECT_NEAR(out.value().at({0, i, c}), mean / 4, 1e-12);
    }
  }
}

TEST(AttentionTest, IdenticalQueriesGiveIdenticalRows) {
  SplitMix64 rng(14);
  Tape<double> tape;
  DTensor q({1, 3, 4});
  const DTensor row = RandomTensor<double>({4}, rng);
  for (int j = 0; j < 3; ++j) {
    for (int c = 0; c < 4; ++c) q.at({0, j, c}) = row[c];
  }
  Qkv<double> qkv{tape.Constant(q), tape.Constant(RandomTensor<double>({1, 3, 4}, rng)),
                  tape.Constant(RandomTensor<double>({1, 3, 4}, rng))};
  auto out = RecalibratedAttention(qkv, 1).value();
  for (int i = 1; i < 3; ++i) {
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.at({0, i, c}), out.at({0, 0, c}), 1e-12);
  }
}

TEST(AttentionTest, MatchesNaiveLoops) {
  SplitMix64 rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    const int heads = 1 + static_cast<int>(rng.Below(3));
    const auto dh = 1 + static_cast<std::int64_t>(rng.Below(4));
    const auto b = 1 + static_cast<std::int64_t>(rng.Below(2));
    const auto t = 1 + static_cast<std::int64_t>(rng.Below(5));
    Tape<double> tape;
    auto qkv = RandomQkv(rng, b, t, dh * heads, tape);
    Var<double> probs;
    auto out = RecalibratedAttention(qkv, heads, &probs).value();
    const auto want = NaiveAttention(qkv.q.value(), qkv.k.value(), qkv.v.value(), heads);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      ASSERT_NEAR(out[i], want[i], 1e-6) << "trial " << trial;
    }
    for (std::int64_t r = 0; r < b * heads * t; ++r) {
      double s = 0;
      for (std::int64_t j = 0; j < t; ++j) s += probs.value()[r * t + j];
      ASSERT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(AttentionTest, HeadsMustDivideWidth) {
  SplitMix64 rng(16);
  Tape<double> tape;
  EXPECT_THROW(RecalibratedAttention(RandomQkv(rng, 1, 2, 5, tape), 2), ShapeError);
}

// --- parameters ----------------------------------------------------------------

TEST(InitPcsrTest, IdentityLayout) {
  auto p = InitPcsr<float>({}, 3, 2, 99);
  ASSERT_EQ(p.layers.size(), 2u);
  for (auto& layer : p.layers) {
    EXPECT_EQ(layer.dsn_weight.value, Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    EXPECT_EQ(layer.dsn_bias.value, Tensor({3}, {0, 0, 0}));
    EXPECT_EQ(layer.fgn_weight.value, Tensor({3, 6}));
    EXPECT_EQ(layer.fgn_bias.value, Tensor({6}, {1, 1, 1, 0, 0, 0}));
  }
}

TEST(InitPcsrTest, SeedIndependent) {
  auto a = InitPcsr<float>({}, 4, 3, 1);
  auto b = InitPcsr<float>({}, 4, 3, 2);
  EXPECT_EQ(PcsrToNamed(a), PcsrToNamed(b));
}

TEST(InitPcsrTest, LayerSharingStoresOnePair) {
  PcsrConfig c;
  c.layer_sharing = LayerSharing::kAcrossLayers;
  auto p = InitPcsr<float>(c, 4, 3);
  EXPECT_EQ(PcsrStoredLayers(c, 3), 1);
  ASSERT_EQ(p.layers.size(), 1u);
  EXPECT_EQ(&p.ForLayer(0), &p.ForLayer(2));
  EXPECT_EQ(p.NumParameters(), 4 * 4 + 4 + 4 * 8 + 8);
  EXPECT_EQ(InitPcsr<float>({}, 4, 3).NumParameters(), 3 * (4 * 4 + 4 + 4 * 8 + 8));
}

TEST(InitPcsrTest, ParameterGroups) {
  auto p = InitPcsr<float>({}, 4, 2);
  EXPECT_EQ(p.DsnParams().size(), 4u);
  EXPECT_EQ(p.FgnParams().size(), 4u);
  p.SetTrainable(false);
  for (auto& [name, q] : p.Named()) EXPECT_FALSE(q->requires_grad) << name;
}

TEST(PcsrCheckpointTest, RoundTripAndNames) {
  PcsrConfig c;
  auto p = RandomPcsr<float>(c, 4, 2, 17);
  const auto named = PcsrToNamed(p);
  std::vector<std::string> names;
  for (const auto& [n, t] : named) names.push_back(n);
  EXPECT_EQ(names, (std::vector<std::string>{"dsn.0.weight", "dsn.0.bias", "fgn.0.weight",
                                             "fgn.0.bias", "dsn.1.weight", "dsn.1.bias",
                                             "fgn.1.weight", "fgn.1.bias"}));
  TempDir dir;
  SavePcsrCheckpoint(p, dir / "a.ckpt");
  auto back = LoadPcsrCheckpoint(dir / "a.ckpt", c, 4, 2);
  EXPECT_EQ(PcsrToNamed(back), named);
  SavePcsrCheckpoint(back, dir / "b.ckpt");
  EXPECT_EQ(ReadFileBytes(dir / "a.ckpt"), ReadFileBytes(dir / "b.ckpt"));
}

TEST(PcsrCheckpointTest, LayoutMismatchIsError) {
  auto p = InitPcsr<float>({}, 4, 2);
  NamedTensors named = PcsrToNamed(p);
  EXPECT_THROW(PcsrFromNamed(named, {}, 4, 3), Error);
  PcsrConfig independent;
  independent.factor_sharing = FactorSharing::kIndependent;
  EXPECT_THROW(PcsrFromNamed(named, independent, 4, 2), Error);
  named[0].first = "dsn.0.kernel";
  try {
    PcsrFromNamed(named, {}, 4, 2);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("dsn.0.weight"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace pcsr
