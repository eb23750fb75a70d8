#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "xfsl/error.hpp"
#include "xfsl/metrics.hpp"

using namespace xfsl;
using namespace xfsl::metrics;

namespace {

// Exhaustive pair count: P(score_pos > score_neg) + 0.5 P(tie).
double pair_auc(const std::vector<double>& s, const std::vector<char>& pos) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!pos[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (pos[j]) continue;
      ++pairs;
      if (s[i] > s[j]) wins += 1.0;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

}  // namespace

TEST(Auc, FourSampleEnumeration) {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.1};
  EXPECT_EQ(auc(s, std::vector<char>{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(auc(s, std::vector<char>{0, 0, 1, 1}), 0.0);
}

TEST(Auc, AllTiedIsHalf) {
  EXPECT_EQ(auc(std::vector<double>(6, 0.3), std::vector<char>{1, 0, 1, 0, 0, 1}), 0.5);
}

TEST(Auc, OneSidedRejected) {
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<char>{1, 1}), ValidationError);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<char>{0, 0}), ValidationError);
}

TEST(Auc, MatchesPairCountOracleWithTies) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> size(2, 30);
  std::uniform_int_distribution<int> level(0, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = size(rng);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<char> pos(static_cast<std::size_t>(n));
    for (auto& v : s) v = level(rng) / 6.0;
    for (auto& p : pos) p = static_cast<char>(level(rng) % 2);
    pos[0] = 1;
    pos[1] = 0;
    EXPECT_NEAR(auc(s, pos), pair_auc(s, pos), 1e-12);
  }
}

TEST(Auc, MonotoneTransformInvariant) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> s(40), t(40);
  std::vector<char> pos(40);
  for (std::size_t i = 0; i < 40; ++i) {
    s[i] = std::round(d(rng) * 4) / 4;
    pos[i] = static_cast<char>(i % 3 == 0);
    t[i] = std::exp(3 * s[i]) + 7;
  }
  EXPECT_EQ(auc(s, pos), auc(t, pos));
}

TEST(MacroAuc, IndependentScoresNearHalf) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = 3000, k = 3;
  std::vector<double> scores(n * k);
  std::vector<std::size_t> labels(n);
  for (auto& v : scores) v = u(rng);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % k;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> col(n);
    std::vector<char> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores[i * k + c];
      pos[i] = labels[i] == c;
    }
    EXPECT_NEAR(auc(col, pos), 0.5, 0.05);
  }
  EXPECT_NEAR(macro_auc(scores, labels, k), 0.5, 0.05);
}

TEST(MacroAuc, PerfectSeparation) {
  const std::vector<double> scores{0.9, 0.05, 0.05, 0.1, 0.8, 0.1, 0.2, 0.2, 0.6};
  const std::vector<std::size_t> labels{0, 1, 2};
  EXPECT_EQ(macro_auc(scores, labels, 3), 1.0);
}

TEST(MacroAuc, MissingClassRejected) {
  const std::vector<double> scores{0.9, 0.1, 0.8, 0.2};
  const std::vector<std::size_t> labels{0, 0};
  EXPECT_THROW(macro_auc(scores, labels, 2), ValidationError);
}

TEST(Confusion, CountsAccuracyAndF1) {
  const std::vector<std::size_t> y{0, 0, 1, 1, 2, 2};
  const std::vector<std::size_t> p{0, 1, 1, 1, 2, 0};
  const auto cm = confusion(y, p, 3);
  EXPECT_EQ(cm, (std::vector<std::size_t>{1, 1, 0, 0, 2, 0, 1, 0, 1}));
  std::size_t trace = cm[0] + cm[4] + cm[8];
  EXPECT_EQ(accuracy(cm, 3), static_cast<double>(trace) / 6.0);
  const auto f1 = per_class_f1(cm, 3);
  EXPECT_NEAR(f1[0], 0.5, 1e-15);       // p = 1/2, r = 1/2
  EXPECT_NEAR(f1[1], 0.8, 1e-15);       // p = 2/3, r = 1
  EXPECT_NEAR(f1[2], 2.0 / 3.0, 1e-15);  // p = 1, r = 1/2
}

TEST(Confusion, PerfectClassifier) {
  const std::vector<std::size_t> y{0, 1, 2, 2};
  const auto cm = confusion(y, y, 3);
  EXPECT_EQ(accuracy(cm, 3), 1.0);
  for (double f : per_class_f1(cm, 3)) EXPECT_EQ(f, 1.0);
}

TEST(Confusion, LabelOutOfRange) {
  EXPECT_THROW(confusion(std::vector<std::size_t>{3}, std::vector<std::size_t>{0}, 3), ValidationError);
}
