#include <gtest/gtest.h>

#include <cmath>

#include "osm/autodiff/rng.hpp"
#include "osm/errors.hpp"
#include "osm/orthomask/learner.hpp"
#include "osm/orthomask/orthomask.hpp"

using namespace osm;
using ad::Tensor;
using costs::CostVector;
using encoder::MaskVector;

namespace {

CostVector costs_of(std::vector<double> c) {
  CostVector v;
  v.criterion = costs::Criterion::flops;
  v.per_group = std::move(c);
  return v;
}

Tensor<double> identity(std::size_t n) {
  Tensor<double> t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor<double> uniform(std::size_t n) { return Tensor<double>(n, n, 1.0 / static_cast<double>(n)); }

Tensor<double> random_weights(std::size_t n, std::uint64_t key, double t = 1.0) {
  ad::CounterRng rng(key);
  Tensor<double> s(n, n);
  for (auto& v : s.storage()) v = rng.uniform(-3.0, 3.0);
  return orthomask::weights(s, t);
}

}  // namespace

TEST(Temperature, Schedule) {
  EXPECT_EQ(orthomask::temperature(0), 1.0);
  EXPECT_NEAR(orthomask::temperature(100000), std::pow(0.999992, 100000), 1e-15);
  EXPECT_EQ(orthomask::temperature(10'000'000), 0.1);
  for (long t = 0; t < 400000; t += 9973) EXPECT_GE(orthomask::temperature(t), orthomask::temperature(t + 9973));
  EXPECT_THROW(orthomask::temperature(-1), DomainError);
}

TEST(Weights, ZeroScoresAreUniformAndRowsSumToOne) {
  const auto w = orthomask::weights(Tensor<double>(5, 5), 0.3);
  for (double v : w.storage()) EXPECT_DOUBLE_EQ(v, 0.2);
  const auto r = random_weights(9, 3);
  for (std::size_t i = 0; i < 9; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) s += r(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Weights, LowerTemperatureSharpensRows) {
  ad::CounterRng rng(4);
  Tensor<double> s(6, 6);
  for (auto& v : s.storage()) v = rng.uniform(-1.0, 1.0);
  auto entropy = [](const Tensor<double>& w) {
    double h = 0.0;
    for (double v : w.storage()) h -= v * std::log(v);
    return h;
  };
  EXPECT_LT(entropy(orthomask::weights(s, 0.1)), entropy(orthomask::weights(s, 1.0)));
}

TEST(SelectK, Examples) {
  const std::vector<double> c = {1, 2, 3};
  EXPECT_EQ(orthomask::select_k(identity(3), c, 4.0), 2);
  EXPECT_EQ(orthomask::select_k(uniform(3), c, 4.0), 1);
  EXPECT_EQ(orthomask::select_k(uniform(3), c, 7.0), 3);
  EXPECT_EQ(orthomask::select_k(identity(3), c, 0.5), 0);
}

TEST(SelectK, MonotoneInBudget) {
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    const auto w = random_weights(8, trial);
    const std::vector<double> c = {3, 1, 4, 1, 5, 9, 2, 6};
    int prev = 0;
    for (double tau = 0.5; tau < 40.0; tau += 0.5) {
      const int k = orthomask::select_k(w, c, tau);
      EXPECT_GE(k, prev);
      prev = k;
    }
  }
}

TEST(AssembleMask, Examples) {
  EXPECT_EQ(orthomask::assemble_mask(identity(4), 0).values, std::vector<double>(4, 0.0));
  EXPECT_EQ(orthomask::assemble_mask(identity(4), 2).values, (std::vector<double>{1, 1, 0, 0}));
  EXPECT_EQ(orthomask::assemble_mask(uniform(4), 2).values, std::vector<double>(4, 0.5));
}

TEST(AssembleMask, PointwiseNestedInK) {
  const auto w = random_weights(7, 11);
  for (int k = 0; k < 7; ++k) {
    const auto a = orthomask::assemble_mask(w, k), b = orthomask::assemble_mask(w, k + 1);
    for (std::size_t j = 0; j < 7; ++j) EXPECT_LE(a.values[j], b.values[j]);
  }
}

TEST(OrthoLoss, Examples) {
  EXPECT_EQ(orthomask::ortho_loss(identity(3), 3), 0.0);
  EXPECT_NEAR(orthomask::ortho_loss(uniform(2), 2), std::sqrt(0.75), 1e-12);
  EXPECT_DOUBLE_EQ(orthomask::ortho_loss(Tensor<double>::from_rows({{1, 0}, {1, 0}}), 2), 1.0);
  EXPECT_EQ(orthomask::ortho_loss(uniform(3), 0), 0.0);
}

TEST(OrthoLoss, ZeroExactlyForDistinctOneHotRows) {
  // Every arrangement of 3 one-hot rows over 3 columns: zero iff distinct.
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 3; ++c) {
        Tensor<double> w(3, 3);
        w(0, a) = w(1, b) = w(2, c) = 1.0;
        const bool distinct = a != b && b != c && a != c;
        EXPECT_EQ(orthomask::ortho_loss(w, 3) == 0.0, distinct);
      }
  EXPECT_GT(orthomask::ortho_loss(random_weights(4, 2), 2), 0.0);
}

TEST(RoundMask, CollisionFallsBackGreedily) {
  const auto w = Tensor<double>::from_rows({{0.6, 0.4}, {0.7, 0.3}});
  const auto m = orthomask::round_mask(w, costs_of({1, 1}), 3.0);
  EXPECT_EQ(m.values, (std::vector<double>{1, 1}));
  EXPECT_EQ(m.mode, encoder::MaskMode::hard);
}

TEST(RoundMask, PermutationLike) {
  Tensor<double> w(4, 4, 0.01);
  w(0, 2) = w(1, 0) = w(2, 3) = w(3, 1) = 0.97;
  const auto m = orthomask::round_mask(w, costs_of({1, 1, 1, 1}), 2.5);
  EXPECT_EQ(m.values, (std::vector<double>{1, 0, 1, 0}));
}

TEST(RoundMasks, NestedAndWithinBudget) {
  for (std::uint64_t trial = 0; trial < 30; ++trial) {
    const auto w = random_weights(10, 100 + trial, 0.2);
    const auto cost = costs_of({5, 3, 8, 1, 2, 7, 4, 6, 2, 9});
    std::vector<orthomask::SubnetPlan> plans(3);
    plans[0].tau = 12;
    plans[1].tau = 25;
    plans[2].tau = 40;
    orthomask::round_masks(w, plans, cost);
    for (std::size_t m = 0; m < plans.size(); ++m) {
      EXPECT_TRUE(costs::verify(plans[m].mask, cost, plans[m].tau));
      if (m > 0)
        for (std::size_t j = 0; j < 10; ++j)
          EXPECT_TRUE(plans[m - 1].mask.values[j] == 0.0 || plans[m].mask.values[j] == 1.0);
    }
  }
}

TEST(RoundMask, InfeasibleBudget) {
  EXPECT_THROW(orthomask::round_mask(identity(2), costs_of({1, 1}), 0.0), BudgetInfeasibleError);
}

TEST(OrthoSoftmaxLearner, NoiseBreaksSymmetryAndIsSeeded) {
  const auto cost = costs_of(std::vector<double>(6, 1.0));
  orthomask::OrthoSoftmaxLearner a(cost, {3.5}, {}, 1e-3, 5);
  orthomask::OrthoSoftmaxLearner b(cost, {3.5}, {}, 1e-3, 5);
  orthomask::OrthoSoftmaxLearner zero(cost, {3.5}, {}, 0.0, 5);
  EXPECT_EQ(a.scores().value, b.scores().value);
  double spread = 0.0;
  for (double v : a.scores().value.storage()) spread = std::max(spread, std::abs(v));
  EXPECT_GT(spread, 0.0);
  EXPECT_LE(spread, 1e-3);
  for (double v : zero.scores().value.storage()) EXPECT_EQ(v, 0.0);
}

TEST(OrthoSoftmaxLearner, StepGatesMatchFormulas) {
  const auto cost = costs_of({1, 2, 3, 4});
  orthomask::OrthoSoftmaxLearner learner(cost, {4.5}, {}, 1e-3, 5);
  ad::Tape<double> tape;
  const auto g = learner.step_gates(tape, 0, 1000);
  const auto w = learner.weights_at(1000);
  EXPECT_EQ(g.k, orthomask::select_k(w, cost.per_group, 4.5));
  ASSERT_TRUE(g.ortho.has_value());
  EXPECT_NEAR(g.ortho->value().item(), orthomask::ortho_loss(w, g.k), 1e-14);
  EXPECT_DOUBLE_EQ(g.temperature, orthomask::temperature(1000));
}
