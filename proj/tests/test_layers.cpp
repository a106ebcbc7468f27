// Copyright 2026 The DLF Authors. All Rights Reserved.
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

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "dlf/layers.hpp"
#include "dlf/verify.hpp"
#include "support/oracles.hpp"

namespace dlf {
namespace {

using ad::Var;
using testing::random_normal;

Tensor one_hot_rows(std::vector<int> labels, std::size_t classes) {
  Tensor t(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  return t;
}

// ---------------------------------------------------------------- actnorm

TEST(ActNorm, IdentityParameters) {
  std::mt19937_64 rng(1);
  ActNorm layer(3, /*data_init=*/false);
  Tensor x = random_normal(Shape{2, 2, 2, 3}, rng);
  auto out = layer.forward(ad::constant(x));
  EXPECT_EQ(out.y.value(), x);
  EXPECT_EQ(out.logdet.value(), Tensor(Shape{2}));
}

TEST(ActNorm, DiagonalLogDet) {
  ActNorm layer(2, false);
  layer.params().scale.mutable_value().fill(2.0);
  auto out = layer.forward(ad::constant(Tensor(Shape{1, 3, 3, 2}, 1.0)));
  EXPECT_NEAR(out.logdet.value()[0], 9 * 2 * std::log(2.0), 1e-12);
  EXPECT_NEAR(out.logdet.value()[0], 12.477, 1e-3);
}

TEST(ActNorm, DataDependentInitialization) {
  std::mt19937_64 rng(2);
  Tensor x = random_normal(Shape{16, 3, 3, 2}, rng, 3.0);
  for (std::size_t i = 0; i < x.size(); i += 2) x[i] += 5.0;
  ActNorm layer(2, true);
  Tensor y = layer.forward(ad::constant(x)).y.value();
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    const std::size_t rows = y.size() / 2;
    for (std::size_t r = 0; r < rows; ++r) mean += y[r * 2 + c];
    mean /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) var += (y[r * 2 + c] - mean) * (y[r * 2 + c] - mean);
    var /= static_cast<double>(rows);
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
  EXPECT_TRUE(layer.params().initialized);
}

TEST(ActNorm, ZeroScaleIsDomainError) {
  ActNorm layer(2, false);
  layer.params().scale.mutable_value()[1] = 0.0;
  EXPECT_THROW(layer.forward(ad::constant(Tensor(Shape{1, 1, 1, 2}))), DomainError);
}

// ---------------------------------------------------------------- inv1x1

TEST(Inv1x1, IdentityWeight) {
  std::mt19937_64 rng(3);
  Tensor eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 4] = 1.0;
  Inv1x1 layer(eye);
  Tensor x = random_normal(Shape{2, 2, 2, 3}, rng);
  auto out = layer.forward(ad::constant(x));
  EXPECT_EQ(out.y.value(), x);
  EXPECT_EQ(out.logdet.value()[0], 0.0);
}

TEST(Inv1x1, ScaledIdentityLogDet) {
  Tensor w(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) w[i * 4] = 2.0;
  Inv1x1 layer(w);
  auto out = layer.forward(ad::constant(Tensor(Shape{1, 2, 2, 3}, 1.0)));
  EXPECT_NEAR(out.logdet.value()[0], 4 * std::log(8.0), 1e-12);
  EXPECT_NEAR(out.logdet.value()[0], 8.3178, 1e-4);
}

TEST(Inv1x1, RandomOrthogonalHasZeroLogDet) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Inv1x1 layer(6, rng);
    const Tensor& w = layer.weight().value();
    EXPECT_NEAR(std::log(std::abs(testing::det_full_pivot(w.values(), 6))), 0.0, 1e-8);
    auto out = layer.forward(ad::constant(Tensor(Shape{1, 2, 2, 6}, 1.0)));
    EXPECT_NEAR(out.logdet.value()[0], 0.0, 1e-8);
  }
}

TEST(Inv1x1, InverseRoundTrip) {
  std::mt19937_64 rng(4);
  Inv1x1 layer(4, rng);
  Tensor x = random_normal(Shape{3, 2, 3, 4}, rng);
  EXPECT_LE(max_abs_diff(layer.inverse(layer.forward(ad::constant(x)).y.value()), x), 1e-8);
}

TEST(Inv1x1, ScalarSolve) {
  Tensor w(Shape{2, 2}, std::vector<double>{2, 0, 0, 2});
  Inv1x1 layer(w);
  Tensor x = layer.inverse(Tensor(Shape{1, 1, 1, 2}, std::vector<double>{2, 4}));
  EXPECT_EQ(x.values(), (std::vector<double>{1, 2}));
}

TEST(Inv1x1, WellConditionedRandomWeightAgainstExplicitInverse) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor w = random_normal(Shape{8, 8}, rng);
    Eigen::Map<Eigen::Matrix<double, 8, 8, Eigen::RowMajor>> wm(w.data().data());
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(wm);
    const double cond = svd.singularValues()(0) / svd.singularValues()(7);
    if (cond >= 100.0) continue;
    Inv1x1 layer(w);
    Tensor x = random_normal(Shape{2, 2, 2, 8}, rng);
    Tensor y = layer.forward(ad::constant(x)).y.value();
    Tensor back = layer.inverse(y);
    EXPECT_LE(max_abs_diff(back, x), 1e-7);
    // Brute force: x = W^{-1} y per position.
    const Eigen::MatrixXd winv = wm.inverse();
    for (std::size_t p = 0; p < y.size() / 8; ++p) {
      Eigen::Map<const Eigen::VectorXd> yv(y.data().data() + p * 8, 8);
      Eigen::VectorXd xv = winv * yv;
      for (int i = 0; i < 8; ++i) EXPECT_NEAR(back[p * 8 + i], xv(i), 1e-9);
    }
  }
}

TEST(Inv1x1, SingularWeightNamesLayer) {
  Tensor w(Shape{2, 2}, std::vector<double>{1, 2, 2, 4});
  Inv1x1 layer(w, "level0/step3/inv1x1");
  try {
    layer.forward(ad::constant(Tensor(Shape{1, 1, 1, 2})));
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("level0/step3/inv1x1"), std::string::npos);
  }
  EXPECT_THROW(layer.inverse(Tensor(Shape{1, 1, 1, 2})), DomainError);
}

// ---------------------------------------------------------------- dynlin

DynLinConfig flat_cfg(std::size_t k, DynLinVariant v = DynLinVariant::standard, CondSpec cond = {}) {
  DynLinConfig c;
  c.partitions = k;
  c.variant = v;
  c.cond = cond;
  c.hidden = 8;
  c.flat = true;
  return c;
}

TEST(DynLin, SinglePartitionIdentityAtInit) {
  std::mt19937_64 rng(6);
  DynamicLinear layer(4, flat_cfg(1), rng);
  Tensor x = random_normal(Shape{3, 1, 1, 4}, rng);
  auto out = layer.forward(ad::constant(x));
  EXPECT_EQ(out.y.value(), x);
  EXPECT_EQ(out.logdet.value(), Tensor(Shape{3}));
}

// Net 2 forced to s = exp(0 * tanh(.) + log 2) = 2 and mu = 1.
void stub_second_net(const DynamicLinear& layer) {
  const CouplingNet& g = layer.nets()[0];
  g.alpha().mutable_value()[0] = 0.0;
  g.beta().mutable_value()[0] = std::log(2.0);
  for (const auto& p : g.parameters()) {
    if (p.name.ends_with("conv3/b")) p.var.mutable_value()[1] = 1.0;
  }
}

TEST(DynLin, HandEvaluatedStubNet) {
  std::mt19937_64 rng(7);
  DynamicLinear layer(2, flat_cfg(2), rng);
  stub_second_net(layer);
  auto out = layer.forward(ad::constant(Tensor(Shape{1, 1, 1, 2}, std::vector<double>{3.0, 2.0})));
  EXPECT_NEAR(out.y.value()[0], 3.0, 1e-15);
  EXPECT_NEAR(out.y.value()[1], 5.0, 1e-15);
  EXPECT_NEAR(out.logdet.value()[0], std::log(2.0), 1e-15);
  EXPECT_NEAR(out.logdet.value()[0], 0.6931, 1e-4);

  Tensor x = layer.inverse(Tensor(Shape{1, 1, 1, 2}, std::vector<double>{3.0, 5.0}));
  EXPECT_NEAR(x[0], 3.0, 1e-15);
  EXPECT_NEAR(x[1], 2.0, 1e-15);
}

TEST(DynLin, IdentityFirstWithTwoPartitionsIsAffineCoupling) {
  for (bool flat : {true, false}) {
    std::mt19937_64 rng(8);
    DynLinConfig cfg = flat_cfg(2);
    cfg.flat = flat;
    cfg.identity_first = true;
    DynamicLinear layer(4, cfg, rng);
    perturb(layer.parameters(), rng, 0.3);
    Tensor x = random_normal(flat ? Shape{5, 1, 1, 4} : Shape{2, 3, 3, 4}, rng);
    auto dl = layer.forward(ad::constant(x));
    auto ac = affine_coupling_forward(ad::constant(x), layer.nets()[0]);
    EXPECT_EQ(dl.y.value(), ac.y.value());
    EXPECT_EQ(dl.logdet.value(), ac.logdet.value());
  }
}

TEST(DynLin, SinglePartitionIsConstantAffineMap) {
  std::mt19937_64 rng(9);
  DynamicLinear layer(3, flat_cfg(1), rng);
  perturb(layer.parameters(), rng, 0.5);
  const Tensor& ls = layer.first_log_scale().value();
  const Tensor& mu = layer.first_shift().value();
  Tensor x = random_normal(Shape{4, 1, 1, 3}, rng);
  Tensor y = layer.forward(ad::constant(x)).y.value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i] * std::exp(ls[i % 3]) + mu[i % 3]);
}

TEST(DynLin, IndivisibleChannelsRejectedAtConstruction) {
  std::mt19937_64 rng(10);
  EXPECT_THROW(DynamicLinear(6, flat_cfg(4), rng), ConfigError);
}

TEST(DynLin, ConditionPresenceMustMatchConfig) {
  std::mt19937_64 rng(11);
  DynamicLinear uncond(2, flat_cfg(2), rng);
  DynamicLinear cond(2, flat_cfg(2, DynLinVariant::standard, CondSpec::classes(3)), rng);
  Var x = ad::constant(Tensor(Shape{1, 1, 1, 2}));
  EXPECT_THROW(uncond.forward(x, ad::constant(one_hot_rows({0}, 3))), ContractError);
  EXPECT_THROW(cond.forward(x), ContractError);
  EXPECT_THROW(cond.forward(x, ad::constant(one_hot_rows({0}, 4))), ContractError);
}

TEST(DynLin, RoundTripAllVariants) {
  for (std::size_t k : {1, 2, 4}) {
    for (auto v : {DynLinVariant::standard, DynLinVariant::inverse}) {
      for (bool flat : {true, false}) {
        for (int seed = 0; seed < 25; ++seed) {
          std::mt19937_64 rng(100 + seed);
          DynLinConfig cfg = flat_cfg(k, v);
          cfg.flat = flat;
          DynamicLinear layer(8, cfg, rng);
          perturb(layer.parameters(), rng, 0.3);
          Tensor x = random_normal(flat ? Shape{4, 1, 1, 8} : Shape{2, 3, 3, 8}, rng);
          Tensor back = layer.inverse(layer.forward(ad::constant(x)).y.value());
          EXPECT_LE(max_abs_diff(back, x), 1e-8) << "K=" << k << " " << to_string(v) << " flat=" << flat;
        }
      }
    }
  }
}

TEST(DynLin, ConditionalRoundTripDependsOnCondition) {
  for (auto v : {DynLinVariant::standard, DynLinVariant::inverse}) {
    std::mt19937_64 rng(12);
    DynamicLinear layer(4, flat_cfg(2, v, CondSpec::classes(10)), rng);
    perturb(layer.parameters(), rng, 0.3);
    Tensor x = random_normal(Shape{3, 1, 1, 4}, rng);
    Tensor h1 = one_hot_rows({1, 4, 9}, 10);
    Tensor h2 = one_hot_rows({2, 5, 0}, 10);
    Tensor y = layer.forward(ad::constant(x), ad::constant(h1)).y.value();
    EXPECT_LE(max_abs_diff(layer.inverse(y, ad::constant(h1)), x), 1e-8);
    EXPECT_GT(max_abs_diff(layer.inverse(y, ad::constant(h2)), x), 1e-3);
  }
}

TEST(DynLin, InverseVariantPartitionOrderIsIrrelevant) {
  std::mt19937_64 rng(13);
  DynLinConfig cfg = flat_cfg(4, DynLinVariant::inverse);
  cfg.flat = false;
  DynamicLinear layer(8, cfg, rng);
  perturb(layer.parameters(), rng, 0.3);
  Tensor y = random_normal(Shape{2, 2, 2, 8}, rng);
  Tensor asc = layer.inverse_in_order(y, {}, {0, 1, 2, 3});
  EXPECT_EQ(layer.inverse_in_order(y, {}, {3, 2, 1, 0}), asc);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> order{0, 1, 2, 3};
    std::shuffle(order.begin(), order.end(), rng);
    EXPECT_EQ(layer.inverse_in_order(y, {}, order), asc);
  }
  EXPECT_THROW(layer.inverse_in_order(y, {}, {0, 0, 1, 2}), ContractError);
}

TEST(DynLin, StandardVariantJacobianIsTriangularInPartitionOrder) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(200 + seed);
    DynamicLinear layer(6, flat_cfg(2), rng);
    perturb(layer.parameters(), rng, 0.4);
    auto r = verify::check_layer_logdet(layer, random_normal(Shape{1, 1, 1, 6}, rng), {}, std::size_t{3});
    ASSERT_TRUE(r.max_off_pattern.has_value());
    EXPECT_LE(*r.max_off_pattern, 1e-6) << r.summary();
    EXPECT_LE(r.discrepancy, 1e-4) << r.summary();
  }
}

// ---------------------------------------------------------------- log-det oracle

TEST(LogDetOracle, EveryLayerAgreesWithNumericJacobian) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(300 + seed);
    std::vector<std::unique_ptr<FlowLayer>> layers;
    auto an = std::make_unique<ActNorm>(6, false);
    for (double& s : an->params().scale.mutable_value().data()) s = std::uniform_real_distribution<double>(0.3, 2.5)(rng);
    layers.push_back(std::move(an));
    Tensor w = random_normal(Shape{6, 6}, rng);
    layers.push_back(std::make_unique<Inv1x1>(w));
    for (std::size_t k : {1, 2, 3}) {
      for (auto v : {DynLinVariant::standard, DynLinVariant::inverse}) {
        auto dl = std::make_unique<DynamicLinear>(6, flat_cfg(k, v), rng);
        perturb(dl->parameters(), rng, 0.4);
        layers.push_back(std::move(dl));
      }
    }
    for (auto& layer : layers) {
      auto r = verify::check_layer_logdet(*layer, random_normal(Shape{1, 1, 1, 6}, rng));
      EXPECT_LE(r.discrepancy, 1e-4) << r.summary();
    }
    // Image mode: 3x3 convolutions see neighbouring positions.
    DynLinConfig cfg = flat_cfg(2);
    cfg.flat = false;
    DynamicLinear img(2, cfg, rng, "dynlin_img");
    perturb(img.parameters(), rng, 0.4);
    auto r = verify::check_layer_logdet(img, random_normal(Shape{1, 2, 3, 2}, rng));
    EXPECT_LE(r.discrepancy, 1e-4) << r.summary();
    Inv1x1 conv(3, rng);
    perturb(conv.parameters(), rng, 0.3);
    r = verify::check_layer_logdet(conv, random_normal(Shape{1, 2, 2, 3}, rng));
    EXPECT_LE(r.discrepancy, 1e-4) << r.summary();
  }
}

// ---------------------------------------------------------------- squeeze / split

TEST(Squeeze, DefinedPermutation) {
  Tensor x(Shape{1, 4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  Tensor y = squeeze(ad::constant(x)).value();
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2, 4}));
  EXPECT_EQ(y.at(0, 0, 0, 0), 0.0);
  EXPECT_EQ(y.at(0, 0, 0, 1), 1.0);
  EXPECT_EQ(y.at(0, 0, 0, 2), 4.0);
  EXPECT_EQ(y.at(0, 0, 0, 3), 5.0);
  EXPECT_EQ(y.at(0, 1, 1, 0), 10.0);
}

TEST(Squeeze, UnsqueezeIsExactInverseAndLogDetIsZero) {
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = random_normal(Shape{2, 4, 6, 3}, rng);
    Squeeze layer;
    auto out = layer.forward(ad::constant(x));
    EXPECT_EQ(layer.inverse(out.y.value()), x);
    EXPECT_EQ(out.logdet.value(), Tensor(Shape{2}));
  }
}

TEST(Squeeze, PermutationJacobian) {
  std::mt19937_64 rng(14);
  Squeeze layer;
  auto r = verify::check_layer_logdet(layer, random_normal(Shape{1, 2, 2, 2}, rng));
  EXPECT_LE(std::abs(r.numeric_logdet), 1e-10);
  EXPECT_EQ(r.analytic_logdet, 0.0);
}

TEST(Squeeze, OddExtentRejected) {
  EXPECT_THROW(squeeze(ad::constant(Tensor(Shape{1, 3, 4, 1}))), ContractError);
}

TEST(Split, HalvesAndMerge) {
  std::mt19937_64 rng(15);
  Tensor x = random_normal(Shape{2, 2, 2, 8}, rng);
  Split layer;
  auto out = layer.forward(ad::constant(x));
  EXPECT_EQ(out.y.shape(), (Shape{2, 2, 2, 4}));
  EXPECT_EQ(out.factored.shape(), (Shape{2, 2, 2, 4}));
  EXPECT_EQ(layer.merge(out.y.value(), out.factored.value()), x);
  EXPECT_THROW(layer.forward(ad::constant(Tensor(Shape{1, 1, 1, 3}))), ConfigError);
}

TEST(Split, PriorAtTheMode) {
  const std::size_t d = 7;
  Tensor lp = standard_normal_logpdf(ad::constant(Tensor(Shape{2, 1, 1, d}))).value();
  EXPECT_NEAR(lp[0], -0.5 * d * std::log(2.0 * std::numbers::pi), 1e-12);
  EXPECT_EQ(lp[0], lp[1]);
}

// ---------------------------------------------------------------- layer round-trip property

TEST(LayerProperty, RoundTripOver100Seeds) {
  double worst = 0.0;
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(500 + seed);
    Tensor x = random_normal(Shape{2, 2, 2, 4}, rng, 2.0);
    ActNorm an(4, true);
    Tensor y = an.forward(ad::constant(x)).y.value();
    worst = std::max(worst, max_abs_diff(an.inverse(y), x));
    Inv1x1 conv(4, rng);
    perturb(conv.parameters(), rng, 0.2);
    worst = std::max(worst, max_abs_diff(conv.inverse(conv.forward(ad::constant(x)).y.value()), x));
    DynLinConfig cfg = flat_cfg(2, seed % 2 ? DynLinVariant::inverse : DynLinVariant::standard);
    cfg.flat = false;
    DynamicLinear dl(4, cfg, rng);
    perturb(dl.parameters(), rng, 0.3);
    worst = std::max(worst, max_abs_diff(dl.inverse(dl.forward(ad::constant(x)).y.value()), x));
  }
  EXPECT_LE(worst, 1e-8);
}

}  // namespace
}  // namespace dlf
