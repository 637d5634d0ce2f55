// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "ssmamba/metrics.hpp"
#include "ssmamba/random.hpp"

namespace ssm {
namespace {

// O(P * N) pairwise oracle: correctly ordered pairs plus half the ties.
double pairwise_auc(const std::vector<int>& pos, const std::vector<double>& s) {
  double good = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (pos[i] && !pos[j]) {
        pairs += 1;
        if (s[i] > s[j]) good += 1;
        else if (s[i] == s[j]) good += 0.5;
      }
  return good / pairs;
}

TEST(Metrics, PerfectPredictions) {
  std::vector<std::size_t> y{0, 1, 2, 1, 0};
  EXPECT_EQ(accuracy(y, y), 1.0);
  EXPECT_EQ(macro_f1(y, y), 1.0);
  std::vector<double> probs;
  for (auto c : y)
    for (std::size_t k = 0; k < 3; ++k) probs.push_back(k == c ? 0.8 : 0.1);
  auto m = classification_metrics(y, probs, 3);
  EXPECT_EQ(m.acc, 100.0);
  EXPECT_EQ(m.macro_f1, 100.0);
  EXPECT_EQ(m.auc, 100.0);
}

TEST(Metrics, PerfectRankingBinaryAuc) {
  EXPECT_EQ(auc_binary({1, 1, 0, 0}, {0.9, 0.8, 0.3, 0.1}), 1.0);
  EXPECT_EQ(auc_binary({0, 0, 1, 1}, {0.9, 0.8, 0.3, 0.1}), 0.0);
  EXPECT_EQ(auc_binary({1, 0}, {0.5, 0.5}), 0.5);
}

TEST(Metrics, AucMatchesPairwiseOracleExactly) {
  Rng rng(1);
  for (int inst = 0; inst < 500; ++inst) {
    const std::size_t n = 2 + rng.below(inst < 250 ? 30 : 199);
    std::vector<int> pos(n);
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = rng.uniform() < 0.5;
      s[i] = inst % 2 ? double(rng.below(5)) / 4.0 : rng.uniform();  // half the instances tie heavily
    }
    pos[0] = 1;
    pos[1] = 0;
    ASSERT_EQ(auc_binary(pos, s), pairwise_auc(pos, s)) << "instance " << inst;
  }
}

TEST(Metrics, SingleClassAucIsAnError) {
  EXPECT_THROW(auc_binary({1, 1, 1}, {0.1, 0.2, 0.3}), std::invalid_argument);
  EXPECT_THROW(auc_ovr({2, 2}, {0.1, 0.2, 0.7, 0.3, 0.3, 0.4}, 3), std::invalid_argument);
  auto m = classification_metrics({1, 1}, {0.2, 0.8, 0.6, 0.4}, 2);
  EXPECT_FALSE(m.has_auc);
}

TEST(Metrics, MacroF1HandExample) {
  // class 0: tp 1 fp 1 fn 1 -> 0.5; class 1: tp 1 fp 1 fn 0 -> 2/3; class 2: tp 0 fp 0 fn 1 -> 0
  std::vector<std::size_t> t{0, 0, 1, 2}, p{0, 1, 1, 0};
  EXPECT_NEAR(macro_f1(t, p), (0.5 + 2.0 / 3.0 + 0.0) / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(accuracy(t, p), 0.5);
}

TEST(Metrics, OneVsRestAveragesPresentClasses) {
  std::vector<std::size_t> y{0, 1, 2, 0, 1};
  std::vector<double> probs{0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.1, 0.2, 0.7, 0.3, 0.4, 0.3, 0.5, 0.1, 0.4};
  double expect = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<int> pos;
    std::vector<double> s;
    for (std::size_t i = 0; i < 5; ++i) {
      pos.push_back(y[i] == c);
      s.push_back(probs[i * 3 + c]);
    }
    expect += pairwise_auc(pos, s);
  }
  EXPECT_NEAR(auc_ovr(y, probs, 3), expect / 3, 1e-15);
}

TEST(Metrics, RoundTwoDecimals) {
  EXPECT_EQ(round2(95.55555), 95.56);
  EXPECT_EQ(round2(100.0), 100.0);
}

}  // namespace
}  // namespace ssm
