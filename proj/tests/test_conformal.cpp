#include <gtest/gtest.h>

#include <random>

#include "cpsolver/conformal.hpp"
#include "oracles.hpp"

namespace cpsolver {
namespace {

NonconformityRecord record(int id, std::vector<double> s) { return {id, std::move(s)}; }

std::vector<NonconformityRecord> constantRecords(std::size_t n, std::vector<double> s) {
  std::vector<NonconformityRecord> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(record(static_cast<int>(i), s));
  return out;
}

/// Max over m agents of |N(0, sigma_h)| style errors; sigma grows with h.
std::vector<NonconformityRecord> synthetic(std::mt19937_64& rng, std::size_t n, int H, int m) {
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<NonconformityRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    NonconformityRecord r{static_cast<int>(i), std::vector<double>(H, 0.0)};
    for (int b = 0; b < m; ++b) {
      for (int h = 0; h < H; ++h) {
        double sigma = 0.3 * (h + 1);
        r.scores[h] = std::max(r.scores[h], std::hypot(sigma * noise(rng), sigma * noise(rng)));
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

TEST(Nonconformity, EuclideanExamples) {
  EXPECT_DOUBLE_EQ(nonconformity({2, 3}, {2, 4}), 1.0);
  EXPECT_DOUBLE_EQ(nonconformity({1.5, 1.5}, {1.5, 1.5}), 0.0);
  EXPECT_DOUBLE_EQ(nonconformity({0, 0}, {3, 4}), 5.0);
}

TEST(ScoreCalibrationSet, SingleAgentAndMax) {
  CalibrationSample one{0, {{1, {{0, 0}, {0, 0}}}}, {{1, {{0, 1}, {3, 4}}}}};
  auto r = scoreCalibrationSet({one}, 2);
  EXPECT_EQ(r[0].scores, (std::vector<double>{1.0, 5.0}));
  CalibrationSample two{1, {{1, {{0, 0}}}, {2, {{0, 0}}}}, {{1, {{1, 0}}}, {2, {{0, 2.5}}}}};
  EXPECT_DOUBLE_EQ(scoreCalibrationSet({two}, 1)[0].scores[0], 2.5);
}

TEST(ScoreCalibrationSet, MatchesNestedLoopOracle) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int trial = 0; trial < 50; ++trial) {
    CalibrationSample s{trial, {}, {}};
    for (int b = 0; b < 3; ++b) {
      for (int h = 0; h < 2; ++h) {
        s.predicted[b].push_back({u(rng), u(rng)});
        s.actual[b].push_back({u(rng), u(rng)});
      }
    }
    auto got = scoreCalibrationSet({s}, 2)[0].scores;
    for (int h = 0; h < 2; ++h) {
      double expect = 0.0;
      for (int b = 0; b < 3; ++b) {
        double dr = s.predicted[b][h].row - s.actual[b][h].row;
        double dc = s.predicted[b][h].col - s.actual[b][h].col;
        expect = std::max(expect, std::sqrt(dr * dr + dc * dc));
      }
      EXPECT_DOUBLE_EQ(got[h], expect);
    }
  }
}

TEST(ScoreCalibrationSet, MissingDataNamesInstance) {
  CalibrationSample s{17, {{1, {{0, 0}}}, {2, {{0, 0}}}}, {{1, {{1, 0}}}, {3, {{0, 0}}}}};
  try {
    scoreCalibrationSet({s}, 1);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
  }
  CalibrationSample short_s{5, {{1, {{0, 0}}}}, {{1, {{1, 0}}}}};
  EXPECT_THROW(scoreCalibrationSet({short_s}, 2), std::invalid_argument);
}

TEST(Alphas, ConstantScoresAndFloor) {
  auto alphas = quantileAlphas(constantRecords(20, {2.0, 4.0, 0.0}), 0.05);
  EXPECT_DOUBLE_EQ(alphas[0], 0.5);
  EXPECT_DOUBLE_EQ(alphas[1], 0.25);
  EXPECT_DOUBLE_EQ(alphas[2], 1.0 / kQuantileFloor);
  EXPECT_THROW(quantileAlphas({}, 0.05), std::invalid_argument);
}

TEST(Alphas, ScaleEquivariance) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  std::vector<NonconformityRecord> cal1;
  for (int i = 0; i < 30; ++i) {
    double x = u(rng);
    cal1.push_back(record(i, {x, 2 * x}));
  }
  auto a = quantileAlphas(cal1, 0.05);
  EXPECT_NEAR(a[0] / a[1], 2.0, 1e-12);
}

TEST(Alphas, MatchSortOracle) {
  std::mt19937_64 rng(9);
  std::exponential_distribution<double> e(1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<NonconformityRecord> cal1;
    for (int i = 0; i < 50; ++i) cal1.push_back(record(i, {e(rng), e(rng), e(rng)}));
    for (int pct : {5, 10, 20}) {
      auto a = quantileAlphas(cal1, pct / 100.0);
      for (int h = 0; h < 3; ++h) {
        std::vector<double> col;
        for (const auto& r : cal1) col.push_back(r.scores[h]);
        std::sort(col.begin(), col.end());
        long rank = std::min<long>(oracle::exactRank(50, pct), 50);
        EXPECT_DOUBLE_EQ(a[h], 1.0 / col[rank - 1]);
      }
    }
  }
}

TEST(Calibrate, RankArithmetic) {
  auto c19 = calibrate(constantRecords(19, {1.0}), {1.0}, 0.05);
  EXPECT_EQ(c19.p, 19);
  EXPECT_DOUBLE_EQ(c19.C[0], 1.0);
  auto c9 = calibrate(constantRecords(9, {1.0}), {1.0}, 0.05);
  EXPECT_EQ(c9.p, 10);
  EXPECT_TRUE(std::isinf(c9.C[0]));
  EXPECT_FALSE(c9.finite());
  for (long n : {9, 19, 99, 199}) {
    for (int pct : {1, 5}) {
      EXPECT_EQ(conformalRank(n, pct / 100.0), oracle::exactRank(n, pct)) << n << " " << pct;
    }
  }
  EXPECT_EQ(conformalRank(199, 0.05), 190);
}

TEST(Calibrate, UnitAlphaMatchesTextbookSplitConformal) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  std::uniform_int_distribution<int> size(1, 250);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> scores(size(rng));
    for (double& s : scores) s = u(rng);
    std::vector<NonconformityRecord> cal2;
    for (double s : scores) cal2.push_back(record(0, {s}));
    int pct = trial % 2 ? 5 : 10;
    auto c = calibrate(cal2, {1.0}, pct / 100.0);
    double expect = oracle::splitConformalQuantile(scores, pct);
    if (std::isinf(expect)) {
      EXPECT_TRUE(std::isinf(c.C[0]));
    } else {
      EXPECT_EQ(c.C[0], expect);
    }
  }
}

TEST(Calibrate, RadiiScaleByAlphas) {
  std::vector<NonconformityRecord> cal2;
  for (int i = 0; i < 40; ++i) cal2.push_back(record(i, {0.1 * i, 0.3 * i}));
  auto c = calibrate(cal2, {2.0, 0.5}, 0.1);
  // Combined score max(2 * 0.1i, 0.5 * 0.3i) = 0.2i; p = ceil(41 * 0.9) = 37.
  EXPECT_EQ(c.p, 37);
  EXPECT_NEAR(c.C[0], 0.2 * 36 / 2.0, 1e-12);
  EXPECT_NEAR(c.C[1], 0.2 * 36 / 0.5, 1e-12);
}

TEST(Calibrate, InvalidInputs) {
  EXPECT_THROW(calibrate({}, {1.0}, 0.05), std::invalid_argument);
  EXPECT_THROW(calibrate(constantRecords(5, {1.0}), {0.0}, 0.05), std::invalid_argument);
  EXPECT_THROW(calibrate(constantRecords(5, {1.0}), {1.0}, 1.5), std::invalid_argument);
  EXPECT_THROW(calibrate(constantRecords(5, {1.0, 2.0}), {1.0}, 0.05), std::invalid_argument);
}

TEST(Coverage, Extremes) {
  auto test = constantRecords(10, {0.5, 0.7});
  CPIntervals inf;
  inf.C = {kInfinity, kInfinity};
  EXPECT_DOUBLE_EQ(empiricalCoverage(test, inf), 1.0);
  CPIntervals zero;
  zero.C = {0.0, 0.0};
  EXPECT_DOUBLE_EQ(empiricalCoverage(test, zero), 0.0);
  CPIntervals partial;
  partial.C = {1.0, 0.6};  // joint event fails on the second step
  EXPECT_DOUBLE_EQ(empiricalCoverage(test, partial), 0.0);
}

TEST(Coverage, MonteCarloMarginalGuarantee) {
  std::mt19937_64 rng(12);
  double sum = 0.0;
  const int trials = 200;
  for (int k = 0; k < trials; ++k) {
    auto cal1 = synthetic(rng, 199, 5, 3);
    auto cal2 = synthetic(rng, 199, 5, 3);
    auto test = synthetic(rng, 500, 5, 3);
    auto c = calibrateSplit(cal1, cal2, 0.05);
    sum += empiricalCoverage(test, c);
  }
  EXPECT_GE(sum / trials, 0.95 - 0.02);
}

TEST(Coverage, ArbitraryAlphasStayValid) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.05, 20.0);
  AlphaRoutine random_alphas = [&](const std::vector<NonconformityRecord>& cal1, double) {
    std::vector<double> a(cal1.front().scores.size());
    for (double& x : a) x = u(rng);
    return a;
  };
  double sum = 0.0;
  const int trials = 200;
  for (int k = 0; k < trials; ++k) {
    auto cal1 = synthetic(rng, 50, 4, 2);
    auto cal2 = synthetic(rng, 199, 4, 2);
    auto test = synthetic(rng, 500, 4, 2);
    sum += empiricalCoverage(test, calibrateSplit(cal1, cal2, 0.05, random_alphas, "random"));
  }
  EXPECT_GE(sum / trials, 0.95 - 0.02);
}

TEST(Calibrate, MonotoneInDeltaAndPermutationInvariant) {
  std::mt19937_64 rng(14);
  auto cal1 = synthetic(rng, 100, 3, 2);
  auto cal2 = synthetic(rng, 150, 3, 2);
  auto alphas = quantileAlphas(cal1, 0.05);
  CPIntervals prev = calibrate(cal2, alphas, 0.01);
  for (double d : {0.02, 0.05, 0.1, 0.2, 0.5}) {
    CPIntervals cur = calibrate(cal2, alphas, d);
    EXPECT_LE(cur.p, prev.p);
    for (int h = 0; h < 3; ++h) EXPECT_LE(cur.C[h], prev.C[h]);
    prev = cur;
  }
  auto shuffled = cal2;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  EXPECT_EQ(calibrate(shuffled, alphas, 0.05).C, calibrate(cal2, alphas, 0.05).C);
}

TEST(Calibrate, SplitHalvesByIndex) {
  auto recs = constantRecords(7, {1.0});
  auto [a, b] = splitHalves(recs);
  ASSERT_EQ(a.size(), 3u);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(a.front().instance, 0);
  EXPECT_EQ(b.front().instance, 3);
}

TEST(Artifact, JsonRoundTripWithInfiniteRadius) {
  auto c = calibrate(constantRecords(9, {1.0, 2.0}), {1.0, 0.5}, 0.05);
  auto j = toJson(c);
  EXPECT_TRUE(j["C"][0].is_null());
  for (const char* key : {"delta", "H", "alphas", "C", "cal2_size", "method"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  CPIntervals back = intervalsFromJson(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.H, 2);
  EXPECT_EQ(back.p, c.p);
  EXPECT_TRUE(std::isinf(back.C[1]));
  EXPECT_EQ(back.alphas, c.alphas);
  EXPECT_THROW(intervalsFromJson(nlohmann::json{{"delta", 0.1}}), std::invalid_argument);
}

}  // namespace
}  // namespace cpsolver
