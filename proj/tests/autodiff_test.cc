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
#include <limits>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "pcsr/autodiff.h"
#include "pcsr/error.h"
#include "pcsr/optim.h"
#include "test_util.h"

namespace pcsr {
namespace {

using testing::RandomTensor;
using DVar = Var<double>;
using DTape = Tape<double>;
using DTensor = BasicTensor<double>;

// Runs GradCheck on `op` with random trainable inputs of the given shapes.
// The scalar loss is a random projection of the op output, so no output
// coordinate is invisible to the check.
double OpGradError(const std::vector<Shape>& shapes,
                   const std::function<DVar(std::vector<DVar>&)>& op,
                   std::uint64_t seed = 1, double scale = 1.0) {
  SplitMix64 rng(seed);
  std::vector<BasicParam<double>> params;
  params.reserve(shapes.size());
  for (const auto& s : shapes) {
    params.emplace_back(RandomTensor<double>(s, rng, scale), true);
  }
  std::optional<DTensor> weights;
  const std::function<DVar(DTape&)> loss = [&](DTape& tape) {
    std::vector<DVar> in;
    for (auto& p : params) in.push_back(tape.Parameter(p));
    DVar out = op(in);
    const std::int64_t n = out.value().numel();
    if (!weights) weights = RandomTensor<double>({n, 1}, rng);
    DVar flat = ad::Reshape(out, {1, n});
    return ad::Sum(ad::MatMul(flat, tape.Constant(*weights)));
  };
  NamedParamRefs<double> refs;
  for (size_t i = 0; i < params.size(); ++i) {
    refs.emplace_back("in" + std::to_string(i), &params[i]);
  }
  GradCheckOptions opts;
  opts.eps = 1e-5;
  return GradCheck<double>(loss, refs, opts).max_rel_error;
}

// --- matmul ------------------------------------------------------------------

TEST(MatMulTest, IdentityLeavesInput) {
  Tape<float> tape;
  SplitMix64 rng(1);
  Tensor x = RandomTensor({2, 2}, rng);
  auto y = ad::MatMul(tape.Constant(Tensor({2, 2}, {1, 0, 0, 1})), tape.Constant(x));
  EXPECT_EQ(y.value(), x);
}

TEST(MatMulTest, SmallProduct) {
  Tape<float> tape;
  auto y = ad::MatMul(tape.Constant(Tensor({1, 2}, {1, 2})),
                      tape.Constant(Tensor({2, 1}, {3, 4})));
  ASSERT_EQ(y.dims(), (Shape{1, 1}));
  EXPECT_FLOAT_EQ(y.value()[0], 11.f);
}

TEST(MatMulTest, MismatchNamesBothShapes) {
  Tape<float> tape;
  try {
    ad::MatMul(tape.Constant(Tensor({2, 3})), tape.Constant(Tensor({4, 5})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(ShapeToString({2, 3})), std::string::npos) << msg;
    EXPECT_NE(msg.find(ShapeToString({4, 5})), std::string::npos) << msg;
  }
}

TEST(MatMulTest, GradientOfSumMatchesFiniteDifferences) {
  SplitMix64 rng(5);
  BasicParam<double> a(RandomTensor<double>({5, 4}, rng), true);
  BasicParam<double> b(RandomTensor<double>({4, 3}, rng), true);
  const std::function<DVar(DTape&)> loss = [&](DTape& t) {
    return ad::Sum(ad::MatMul(t.Parameter(a), t.Parameter(b)));
  };
  const auto r = GradCheck<double>(loss, {{"a", &a}, {"b", &b}});
  EXPECT_EQ(r.coords_checked, 32);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(MatMulTest, BatchedMatchesNaiveLoop) {
  Tape<float> tape;
  SplitMix64 rng(6);
  Tensor a = RandomTensor({2, 3, 4}, rng);
  Tensor b = RandomTensor({4, 5}, rng);
  auto y = ad::MatMul(tape.Constant(a), tape.Constant(b));
  ASSERT_EQ(y.dims(), (Shape{2, 3, 5}));
  for (int n = 0; n < 2; ++n) {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 5; ++j) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += a.at({n, i, k}) * b.at({k, j});
        EXPECT_NEAR(y.value().at({n, i, j}), s, 1e-5);
      }
    }
  }
}

TEST(MatMulTest, BatchMatMulTransposeMatchesNaiveLoop) {
  Tape<float> tape;
  SplitMix64 rng(7);
  Tensor a = RandomTensor({2, 3, 4}, rng);
  Tensor b = RandomTensor({2, 5, 4}, rng);
  auto y = ad::BatchMatMul(tape.Constant(a), tape.Constant(b), true);
  ASSERT_EQ(y.dims(), (Shape{2, 3, 5}));
  for (int n = 0; n < 2; ++n) {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 5; ++j) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += a.at({n, i, k}) * b.at({n, j, k});
        EXPECT_NEAR(y.value().at({n, i, j}), s, 1e-5);
      }
    }
  }
}

// --- softmax -----------------------------------------------------------------

TEST(SoftmaxTest, UniformRow) {
  Tape<float> tape;
  auto y = ad::Softmax(tape.Constant(Tensor({3}, {0, 0, 0})));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.value()[i], 1.0 / 3.0, 1e-7);
}

TEST(SoftmaxTest, ShiftedPairClosedForm) {
  Tape<double> tape;
  const double x = 12.0;
  auto y = ad::Softmax(tape.Constant(DTensor({2}, {x, x + std::log(3.0)})));
  EXPECT_NEAR(y.value()[0], 0.25, 1e-12);
  EXPECT_NEAR(y.value()[1], 0.75, 1e-12);
}

TEST(SoftmaxTest, LargeLogitsStayFinite) {
  Tape<float> tape;
  auto y = ad::Softmax(tape.Constant(Tensor({2}, {1000.f, 0.f})));
  EXPECT_FLOAT_EQ(y.value()[0], 1.f);
  EXPECT_FLOAT_EQ(y.value()[1], 0.f);
}

TEST(SoftmaxTest, RandomRowSumsToOne) {
  Tape<float> tape;
  SplitMix64 rng(8);
  auto y = ad::Softmax(tape.Constant(RandomTensor({7}, rng, 3.0)));
  double s = 0;
  for (float v : y.value().data()) {
    EXPECT_GE(v, 0.f);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(SoftmaxTest, RowsAlongInnerAxis) {
  Tape<float> tape;
  SplitMix64 rng(9);
  auto y = ad::Softmax(tape.Constant(RandomTensor({4, 5, 3}, rng, 2.0)), 1);
  for (int a = 0; a < 4; ++a) {
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int b = 0; b < 5; ++b) s += y.value().at({a, b, c});
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(SoftmaxTest, GradientMatchesFiniteDifferences) {
  EXPECT_LT(OpGradError({{7}}, [](auto& in) { return ad::Softmax(in[0]); }), 1e-4);
  EXPECT_LT(OpGradError({{3, 4, 5}}, [](auto& in) { return ad::Softmax(in[0], 1); }),
            1e-4);
}

TEST(SoftmaxTest, NonFiniteInputIsNumericError) {
  Tape<float> tape;
  Tensor x({2}, {0.f, std::numeric_limits<float>::quiet_NaN()});
  EXPECT_THROW(ad::Softmax(tape.Constant(x)), NumericError);
  x[1] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(ad::Softmax(tape.Constant(x)), NumericError);
}

TEST(SoftmaxTest, BadAxisIsShapeError) {
  Tape<float> tape;
  EXPECT_THROW(ad::Softmax(tape.Constant(Tensor({2, 2})), 2), ShapeError);
}

// --- layernorm ---------------------------------------------------------------

TEST(LayerNormTest, ConstantInputGivesZeros) {
  Tape<float> tape;
  auto y = ad::LayerNorm(tape.Constant(Tensor::Full({2, 4}, 3.f)),
                         tape.Constant(Tensor::Full({4}, 1.f)),
                         tape.Constant(Tensor::Full({4}, 0.f)), 1e-6f);
  for (float v : y.value().data()) EXPECT_EQ(v, 0.f);
}

TEST(LayerNormTest, Standardizes) {
  Tape<double> tape;
  auto y = ad::LayerNorm(tape.Constant(DTensor({2}, {1, 3})),
                         tape.Constant(DTensor::Full({2}, 1)),
                         tape.Constant(DTensor::Full({2}, 0)), 1e-12);
  EXPECT_NEAR(y.value()[0], -1.0, 1e-9);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-9);
}

TEST(LayerNormTest, MomentsBeforeAffine) {
  Tape<double> tape;
  SplitMix64 rng(10);
  auto y = ad::LayerNorm(tape.Constant(RandomTensor<double>({3, 16}, rng, 4.0)),
                         tape.Constant(DTensor::Full({16}, 1)),
                         tape.Constant(DTensor::Full({16}, 0)), 1e-5);
  for (int r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 16; ++c) m += y.value().at({r, c});
    m /= 16;
    for (int c = 0; c < 16; ++c) v += std::pow(y.value().at({r, c}) - m, 2);
    v /= 16;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(LayerNormTest, GradientMatchesFiniteDifferences) {
  EXPECT_LT(OpGradError({{3, 6}, {6}, {6}},
                        [](auto& in) { return ad::LayerNorm(in[0], in[1], in[2], 1e-5); }),
            1e-4);
}

TEST(LayerNormTest, RejectsNonPositiveEps) {
  Tape<float> tape;
  auto x = tape.Constant(Tensor({1, 2}, {1, 2}));
  auto g = tape.Constant(Tensor::Full({2}, 1.f));
  auto b = tape.Constant(Tensor::Full({2}, 0.f));
  EXPECT_THROW(ad::LayerNorm(x, g, b, 0.f), ConfigError);
  EXPECT_THROW(ad::LayerNorm(x, g, b, -1e-5f), ConfigError);
  EXPECT_THROW(ad::LayerNorm(x, tape.Constant(Tensor::Full({3}, 1.f)), b, 1e-5f),
               ShapeError);
}

// --- remaining ops -----------------------------------------------------------

TEST(OpGradientTest, Linear) {
  EXPECT_LT(OpGradError({{2, 3, 4}, {4, 5}, {5}},
                        [](auto& in) { return ad::Linear(in[0], in[1], in[2]); }),
            1e-4);
  EXPECT_LT(OpGradError({{3, 4}, {4, 2}},
                        [](auto& in) { return ad::Linear(in[0], in[1], DVar()); }),
            1e-4);
}

TEST(OpGradientTest, BatchMatMul) {
  EXPECT_LT(OpGradError({{2, 3, 4}, {2, 4, 5}},
                        [](auto& in) { return ad::BatchMatMul(in[0], in[1]); }),
            1e-4);
  EXPECT_LT(OpGradError({{2, 3, 4}, {2, 5, 4}},
                        [](auto& in) { return ad::BatchMatMul(in[0], in[1], true); }),
            1e-4);
}

TEST(OpGradientTest, ElementwiseFamily) {
  EXPECT_LT(OpGradError({{3, 4}, {3, 4}}, [](auto& in) { return ad::Add(in[0], in[1]); }),
            1e-4);
  EXPECT_LT(OpGradError({{2, 3, 4}, {4}},
                        [](auto& in) { return ad::AddBroadcast(in[0], in[1]); }),
            1e-4);
  EXPECT_LT(OpGradError({{5}}, [](auto& in) { return ad::MulScalar(in[0], -1.7); }), 1e-4);
  EXPECT_LT(OpGradError({{2, 3, 4}, {2, 4}, {2, 4}},
                        [](auto& in) { return ad::ScaleShift(in[0], in[1], in[2]); }),
            1e-4);
  EXPECT_LT(OpGradError({{4, 5}}, [](auto& in) { return ad::Gelu(in[0]); }), 1e-4);
}

TEST(OpGradientTest, Layout) {
  EXPECT_LT(OpGradError({{2, 6}}, [](auto& in) { return ad::Reshape(in[0], {3, 4}); }),
            1e-4);
  EXPECT_LT(OpGradError({{2, 3, 4, 5}}, [](auto& in) { return ad::Permute0213(in[0]); }),
            1e-4);
  EXPECT_LT(OpGradError({{2, 5, 3}}, [](auto& in) { return ad::Slice(in[0], 1, 1, 3); }),
            1e-4);
  EXPECT_LT(OpGradError({{2, 3, 4}, {4}},
                        [](auto& in) { return ad::PrependToken(in[0], in[1]); }),
            1e-4);
}

TEST(OpGradientTest, Reductions) {
  EXPECT_LT(OpGradError({{2, 3, 4}}, [](auto& in) { return ad::MeanAxis(in[0], 1); }),
            1e-4);
  EXPECT_LT(OpGradError({{2, 3, 4}}, [](auto& in) { return ad::MaxAxis(in[0], 1); }),
            1e-4);
  EXPECT_LT(OpGradError({{3, 4}}, [](auto& in) { return ad::Sum(in[0]); }), 1e-4);
  EXPECT_LT(OpGradError({{3, 4}}, [](auto& in) { return ad::Mean(in[0]); }), 1e-4);
}

TEST(OpGradientTest, LossPieces) {
  EXPECT_LT(OpGradError({{2, 4, 3}}, [](auto& in) { return ad::CosineSimilarity(in[0]); }),
            1e-4);
  EXPECT_LT(OpGradError({{4, 3}}, [](auto& in) { return ad::EntropyFromLogits(in[0]); }),
            1e-4);
  const std::vector<std::uint8_t> mask = {1, 0, 1, 1};
  EXPECT_LT(OpGradError({{4}}, [&](auto& in) { return ad::MaskedMean(in[0], mask); }),
            1e-4);
  const std::vector<int> labels = {0, 2, 1};
  EXPECT_LT(OpGradError({{3, 3}}, [&](auto& in) { return ad::CrossEntropy(in[0], labels); }),
            1e-4);
  EXPECT_LT(OpGradError({{3, 3}},
                        [&](auto& in) { return ad::CrossEntropy(in[0], labels, 0.1); }),
            1e-4);
}

TEST(OpValueTest, CrossEntropyClosedForm) {
  Tape<double> tape;
  // Uniform logits: loss is ln C with or without smoothing.
  const std::vector<int> labels = {1};
  auto l0 = ad::CrossEntropy(tape.Constant(DTensor({1, 4}, {0, 0, 0, 0})), labels);
  EXPECT_NEAR(l0.value().item(), std::log(4.0), 1e-12);
  // logits [0, ln 3]: p = [0.25, 0.75]; smoothed target [0.05+0.9*0, ...].
  auto logits = tape.Constant(DTensor({1, 2}, {0, std::log(3.0)}));
  const double s = 0.1;
  const double on = 1 - s + s / 2, off = s / 2;
  auto l1 = ad::CrossEntropy(logits, labels, s);
  EXPECT_NEAR(l1.value().item(), -(on * std::log(0.75) + off * std::log(0.25)), 1e-12);
  EXPECT_THROW(ad::CrossEntropy(logits, labels, 1.0), ConfigError);
  EXPECT_THROW(ad::CrossEntropy(logits, labels, -0.1), ConfigError);
}

TEST(OpValueTest, MaskedMeanDividesByFullBatch) {
  Tape<double> tape;
  const std::vector<std::uint8_t> mask = {1, 0, 1, 0};
  auto m = ad::MaskedMean(tape.Constant(DTensor({4}, {1, 100, 3, 100})), mask);
  EXPECT_DOUBLE_EQ(m.value().item(), 1.0);
}

TEST(OpValueTest, ShapeErrors) {
  Tape<float> tape;
  EXPECT_THROW(ad::Add(tape.Constant(Tensor({2})), tape.Constant(Tensor({3}))), ShapeError);
  EXPECT_THROW(ad::AddBroadcast(tape.Constant(Tensor({2, 3})), tape.Constant(Tensor({2}))),
               ShapeError);
  EXPECT_THROW(ad::Slice(tape.Constant(Tensor({2, 3})), 1, 2, 2), ShapeError);
}

// --- backward ----------------------------------------------------------------

TEST(BackwardTest, LinearCaseRoutesGradientOnlyToTrainable) {
  Tape<float> tape;
  Param w(Tensor({1, 3}, {0.5f, -1.f, 2.f}), true);
  Param x(Tensor({3, 1}, {1.f, 2.f, 3.f}), false);
  auto xv = tape.Parameter(x);
  auto loss = ad::Sum(ad::MatMul(tape.Parameter(w), xv));
  tape.Backward(loss);
  ASSERT_TRUE(w.grad.has_value());
  EXPECT_EQ(w.grad->data()[0], 1.f);
  EXPECT_EQ(w.grad->data()[1], 2.f);
  EXPECT_EQ(w.grad->data()[2], 3.f);
  EXPECT_FALSE(x.grad.has_value());
  EXPECT_EQ(xv.grad(), nullptr);
}

TEST(BackwardTest, ConstantLossGivesZeroGradients) {
  Tape<float> tape;
  Param w(Tensor({2}, {1.f, 2.f}), true);
  tape.Parameter(w);
  auto loss = tape.Constant(Tensor::Scalar(0.f));
  tape.Backward(loss);
  ASSERT_TRUE(w.grad.has_value());
  for (float g : w.grad->data()) EXPECT_EQ(g, 0.f);
}

TEST(BackwardTest, NonScalarLossIsContractError) {
  Tape<float> tape;
  Param w(Tensor({2}, {1.f, 2.f}), true);
  auto v = tape.Parameter(w);
  EXPECT_THROW(tape.Backward(v), ContractError);
}

TEST(BackwardTest, DisabledTapeTreatsParamsAsConstants) {
  Tape<float> tape(GradMode::kDisabled);
  Param w(Tensor({2}, {1.f, 2.f}), true);
  auto v = tape.Parameter(w);
  EXPECT_FALSE(v.requires_grad());
}

TEST(BackwardTest, FrozenSubgraphGetsNoGradient) {
  Tape<double> tape;
  SplitMix64 rng(11);
  BasicParam<double> frozen(RandomTensor<double>({3, 3}, rng), false);
  BasicParam<double> live(RandomTensor<double>({3}, rng), true);
  auto h = ad::Softmax(ad::MatMul(tape.Constant(RandomTensor<double>({2, 3}, rng)),
                                  tape.Parameter(frozen)));
  auto loss = ad::Sum(ad::AddBroadcast(h, tape.Parameter(live)));
  tape.Backward(loss);
  EXPECT_FALSE(frozen.grad.has_value());
  ASSERT_TRUE(live.grad.has_value());
  for (double g : live.grad->data()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(BackwardTest, Deterministic) {
  auto run = [] {
    Tape<float> tape;
    SplitMix64 rng(12);
    Param w(RandomTensor({6, 6}, rng), true);
    auto x = tape.Constant(RandomTensor({4, 6}, rng));
    auto h = ad::Gelu(ad::MatMul(x, tape.Parameter(w)));
    tape.Backward(ad::Sum(ad::EntropyFromLogits(h)));
    return std::make_pair(h.value(), *w.grad);
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

// --- sgd ---------------------------------------------------------------------

TEST(SgdTest, ZeroRateLeavesParamsBitIdentical) {
  Param p(Tensor({3}, {0.1f, -2.f, 3.3f}), true);
  const Tensor before = p.value;
  p.grad = Tensor({3}, {5.f, 6.f, 7.f});
  std::vector<ParamGroup<float>> groups = {{"g", 0.f, {&p}}};
  SgdStep<float>(groups);
  EXPECT_EQ(p.value, before);
  EXPECT_FALSE(p.grad.has_value());
}

TEST(SgdTest, Arithmetic) {
  Param p(Tensor::Scalar(1.0f), true);
  p.grad = Tensor::Scalar(0.5f);
  std::vector<ParamGroup<float>> groups = {{"g", 0.2f, {&p}}};
  SgdStep<float>(groups);
  EXPECT_FLOAT_EQ(p.value.item(), 0.9f);
}

TEST(SgdTest, GroupsUseTheirOwnRates) {
  Param phi(Tensor::Scalar(1.0f), true), psi(Tensor::Scalar(1.0f), true);
  phi.grad = Tensor::Scalar(1.0f);
  psi.grad = Tensor::Scalar(1.0f);
  std::vector<ParamGroup<float>> groups = {{"dsn", 0.2f, {&phi}}, {"fgn", 0.0005f, {&psi}}};
  SgdStep<float>(groups);
  EXPECT_FLOAT_EQ(phi.value.item(), 0.8f);
  EXPECT_FLOAT_EQ(psi.value.item(), 0.9995f);
}

TEST(SgdTest, MissingGradAndNegativeRate) {
  Param a(Tensor::Scalar(1.0f), true), b(Tensor::Scalar(1.0f), true);
  a.grad = Tensor::Scalar(1.0f);
  std::vector<ParamGroup<float>> groups = {{"g", 0.1f, {&a, &b}}};
  EXPECT_THROW(SgdStep<float>(groups), ContractError);
  EXPECT_FLOAT_EQ(a.value.item(), 1.0f);  // nothing moved

  b.grad = Tensor::Scalar(1.0f);
  groups[0].lr = -0.1f;
  EXPECT_THROW(SgdStep<float>(groups), ConfigError);
  EXPECT_FLOAT_EQ(a.value.item(), 1.0f);
}

TEST(SgdTest, GradientsFiniteDetectsNan) {
  Param a(Tensor::Scalar(1.0f), true);
  a.grad = Tensor::Scalar(std::numeric_limits<float>::quiet_NaN());
  std::vector<ParamGroup<float>> groups = {{"g", 0.1f, {&a}}};
  EXPECT_FALSE(GradientsFinite<float>(groups));
  a.grad = Tensor::Scalar(2.f);
  EXPECT_TRUE(GradientsFinite<float>(groups));
}

// --- grad_check --------------------------------------------------------------

TEST(GradCheckTest, Square) {
  BasicParam<double> w(DTensor::Scalar(3.0), true);
  const std::function<DVar(DTape&)> f = [&](DTape& t) {
    // w^2 written as w * w via a 1x1 matmul
    auto v = ad::Reshape(t.Parameter(w), {1, 1});
    return ad::Sum(ad::MatMul(v, v));
  };
  const auto r = GradCheck<double>(f, {{"w", &w}}, {1e-4});
  EXPECT_NEAR(r.worst_analytic, 6.0, 1e-12);
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_DOUBLE_EQ(w.value.item(), 3.0);  // restored
}

TEST(GradCheckTest, LinearIsExact) {
  SplitMix64 rng(13);
  BasicParam<double> w(RandomTensor<double>({4, 1}, rng), true);
  const DTensor x = RandomTensor<double>({1, 4}, rng);
  const std::function<DVar(DTape&)> f = [&](DTape& t) {
    return ad::Sum(ad::MatMul(t.Constant(x), t.Parameter(w)));
  };
  EXPECT_LT(GradCheck<double>(f, {{"w", &w}}).max_rel_error, 1e-9);
}

TEST(GradCheckTest, NonDeterministicLossIsOracleError) {
  BasicParam<double> w(DTensor::Scalar(1.0), true);
  int calls = 0;
  const std::function<DVar(DTape&)> f = [&](DTape& t) {
    ++calls;
    return ad::Sum(ad::MulScalar(t.Parameter(w), static_cast<double>(calls)));
  };
  EXPECT_THROW(GradCheck<double>(f, {{"w", &w}}), OracleError);
}

TEST(GradCheckTest, CoarseStepIsDetected) {
  BasicParam<double> w(DTensor({3}, {0.3, -1.2, 2.0}), true);
  const std::function<DVar(DTape&)> f = [&](DTape& t) {
    return ad::Sum(ad::Gelu(ad::MulScalar(t.Parameter(w), 4.0)));
  };
  EXPECT_LT(GradCheck<double>(f, {{"w", &w}}, {1e-4}).max_rel_error, 1e-4);
  EXPECT_GT(GradCheck<double>(f, {{"w", &w}}, {0.5}).max_rel_error, 1e-4);
}

}  // namespace
}  // namespace pcsr
