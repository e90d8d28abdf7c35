#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "osm/errors.hpp"
#include "osm/autodiff/rng.hpp"
#include "osm/tasks/tasks.hpp"

using namespace osm;
using ad::Tensor;

namespace {

tasks::SynthConfig small_task() {
  tasks::SynthConfig c;
  c.train_size = 60;
  c.dev_size = 20;
  return c;
}

// One-hot log-probabilities (log 1 = 0, log 0 = -big) for a frame path.
Tensor<double> path_posteriors(const std::vector<int>& path, int classes) {
  Tensor<double> lp(path.size(), static_cast<std::size_t>(classes), -50.0);
  for (std::size_t t = 0; t < path.size(); ++t) lp(t, static_cast<std::size_t>(path[t])) = 0.0;
  return lp;
}

}  // namespace

TEST(Synth, DeterministicAndFeasible) {
  const auto a = tasks::generate(small_task(), 1);
  const auto b = tasks::generate(small_task(), 3);
  ASSERT_EQ(a.train.size(), 60u);
  ASSERT_EQ(a.dev.size(), 20u);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].features, b.train[i].features);
    EXPECT_EQ(a.train[i].labels, b.train[i].labels);
    const auto& s = a.train[i];
    EXPECT_GE(tasks::frames_after_frontend(s.features.rows()), tasks::ctc_min_frames(s.labels));
    EXPECT_GE(s.labels.size(), 2u);
    EXPECT_LE(s.labels.size(), 8u);
    for (int l : s.labels) {
      EXPECT_GE(l, 1);
      EXPECT_LE(l, 8);
    }
  }
  auto other = small_task();
  other.seed = 2;
  EXPECT_NE(other.hash(), small_task().hash());
  EXPECT_FALSE(tasks::generate(other).train[0].features == a.train[0].features);
}

TEST(Synth, NoiselessFramesEqualPrototypes) {
  auto cfg = small_task();
  cfg.noise = 0.0;
  const auto c = tasks::generate(cfg);
  for (const auto& s : c.train) {
    for (std::size_t t = 0; t < s.features.rows(); ++t) {
      // Nearest prototype is at distance exactly zero.
      bool found = false;
      for (std::size_t v = 0; v < c.prototypes.rows() && !found; ++v) {
        bool same = true;
        for (std::size_t d = 0; d < s.features.cols(); ++d) same = same && s.features(t, d) == c.prototypes(v, d);
        found = same;
      }
      EXPECT_TRUE(found);
    }
  }
}

TEST(Synth, InfeasibleLengthsRejected) {
  auto cfg = small_task();
  cfg.min_label_len = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_task();
  cfg.vocab_size = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_task();
  cfg.max_frames_per_label = 1;  // 8 labels in 4 frames after subsampling
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Synth, CacheRoundTripAndHashCheck) {
  const auto path = std::filesystem::temp_directory_path() / "osm_test_corpus.bin";
  const auto c = tasks::generate(small_task());
  tasks::save_corpus(c, path);
  const auto back = tasks::load_corpus(path, small_task());
  ASSERT_EQ(back.dev.size(), c.dev.size());
  EXPECT_EQ(back.dev[3].features, c.dev[3].features);
  EXPECT_EQ(back.prototypes, c.prototypes);
  auto other = small_task();
  other.noise = 0.5;
  EXPECT_THROW(tasks::load_corpus(path, other), FormatError);
  std::filesystem::remove(path);
}

TEST(Ctc, HandCases) {
  const double h = std::log(0.5);
  ad::Tape<double> t;
  auto loss = [&](Tensor<double> lp, std::vector<int> y) { return tasks::ctc_loss(t.constant(lp), y).value().item(); };
  EXPECT_NEAR(loss(Tensor<double>::from_rows({{h, h}}), {1}), 0.69315, 5e-6);
  EXPECT_NEAR(loss(Tensor<double>::from_rows({{h, h}, {h, h}}), {1}), 0.28768, 5e-6);
  EXPECT_NEAR(loss(Tensor<double>::from_rows({{h, h}, {h, h}}), {}), 1.38629, 5e-6);
}

TEST(Ctc, InfeasibleAndOracleLimits) {
  ad::Tape<double> t;
  const auto lp = Tensor<double>(2, 3, std::log(1.0 / 3.0));
  EXPECT_THROW(tasks::ctc_loss(t.constant(lp), std::vector<int>{1, 1}), FeasibilityError);
  EXPECT_THROW(tasks::ctc_loss(t.constant(lp), std::vector<int>{3}), ContractError);
  EXPECT_TRUE(std::isinf(tasks::ctc_brute_force(lp, std::vector<int>{1, 1})));
  EXPECT_THROW(tasks::ctc_brute_force(Tensor<double>(9, 3), std::vector<int>{1}), OracleSizeError);
}

TEST(Ctc, LossIsNegLogProbability) {
  ad::CounterRng rng(5);
  for (int i = 0; i < 20; ++i) {
    Tensor<double> s(6, 4);
    for (auto& v : s.storage()) v = rng.uniform(-2, 2);
    ad::Tape<double> t;
    const double l = tasks::ctc_loss(ad::log_softmax_rows(t.constant(s)), std::vector<int>{1, 3}).value().item();
    EXPECT_GE(l, 0.0);
    EXPECT_GT(std::exp(-l), 0.0);
    EXPECT_LE(std::exp(-l), 1.0);
  }
}

TEST(Decode, CollapseRule) {
  EXPECT_EQ(tasks::greedy_decode(path_posteriors({1, 1, 0, 2}, 3)), (std::vector<int>{1, 2}));
  EXPECT_EQ(tasks::greedy_decode(path_posteriors({0, 0, 0}, 3)), (std::vector<int>{}));
  EXPECT_EQ(tasks::greedy_decode(path_posteriors({1, 0, 1}, 3)), (std::vector<int>{1, 1}));
}

TEST(Decode, OraclePosteriorGivesZeroLer) {
  auto cfg = small_task();
  cfg.noise = 0.0;
  const auto c = tasks::generate(cfg);
  std::vector<std::vector<int>> hyps, refs;
  for (const auto& s : c.dev) {
    // Label then blank per token is always a valid collapse path.
    std::vector<int> path;
    for (int l : s.labels) {
      path.push_back(l);
      path.push_back(0);
    }
    hyps.push_back(tasks::greedy_decode(path_posteriors(path, cfg.vocab_size + 1)));
    refs.push_back(s.labels);
  }
  EXPECT_EQ(tasks::label_error_rate(hyps, refs), 0.0);
}

TEST(Metrics, EditDistanceAndLer) {
  const std::vector<int> abc = {1, 2, 3}, abd = {1, 2, 4}, none = {};
  EXPECT_EQ(tasks::edit_distance(abc, abc), 0u);
  EXPECT_EQ(tasks::edit_distance(abc, abd), 1u);
  EXPECT_EQ(tasks::edit_distance(none, abc), 3u);
  EXPECT_DOUBLE_EQ(tasks::label_error_rate({{1, 2, 4}, {}}, {{1, 2, 3}, {5}}), 50.0);
}
