#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "cpsolver/prediction.hpp"
#include "oracles.hpp"

namespace cpsolver {
namespace {

using namespace std::chrono_literals;

GridMap openWithSpots(int h, int w, std::vector<Coord> spots) {
  return GridMap(w, h, std::vector<std::uint8_t>(w * h, 1), std::move(spots), "open");
}

ObservationHistory historyOf(std::map<AgentId, std::vector<Coord>> seqs, int t = 3) {
  ObservationHistory hist;
  for (auto& [id, s] : seqs) hist.set(id, s, t);
  return hist;
}

TEST(Observation, WindowKeepsMostRecent) {
  ObservationHistory hist(3);
  for (int t = 0; t < 5; ++t) hist.observe(t, {{7, {0, t}}});
  EXPECT_EQ(hist.time(), 4);
  EXPECT_EQ(hist.of(7), (std::vector<Coord>{{0, 2}, {0, 3}, {0, 4}}));
  EXPECT_THROW(ObservationHistory(0), std::invalid_argument);
}

TEST(Observation, ValidateRejectsJumps) {
  GridMap m = openWithSpots(3, 3, {});
  auto ok = historyOf({{1, {{0, 0}, {0, 1}, {0, 1}}}});
  EXPECT_NO_THROW(ok.validate(m));
  auto bad = historyOf({{1, {{0, 0}, {2, 2}}}});
  EXPECT_THROW(bad.validate(m), ContractViolation);
}

TEST(PredictConstant, RepeatsLastPosition) {
  auto hist = historyOf({{0, {{3, 2}, {3, 3}}}});
  auto b = predictConstant(hist, 3);
  EXPECT_EQ(b.horizon, 3);
  EXPECT_EQ(b.issued_at, 3);
  EXPECT_EQ(b.points.at(0), (std::vector<Point>(3, Point{3, 3})));
}

TEST(PredictConstant, ErrorsAndMultipleAgents) {
  auto hist = historyOf({{0, {{1, 1}}}, {4, {{2, 2}}}, {9, {{0, 5}}}});
  EXPECT_THROW(predictConstant(hist, 0), std::invalid_argument);
  EXPECT_THROW(predictConstant(ObservationHistory{}, 2), std::invalid_argument);
  auto b = predictConstant(hist, 2);
  ASSERT_EQ(b.points.size(), 3u);
  EXPECT_EQ(b.points.at(9).front(), (Point{0, 5}));
}

TEST(PredictAstarGoal, StepsOntoAdjacentSoleSpotThenWaits) {
  GridMap m = openWithSpots(5, 5, {{2, 3}});
  DistanceCache cache(m);
  auto hist = historyOf({{0, {{2, 1}, {2, 2}}}});
  auto b = predictAstarGoal(hist, m, cache, 3);
  EXPECT_EQ(b.points.at(0), (std::vector<Point>(3, Point{2, 3})));
}

TEST(PredictAstarGoal, StationaryHistoryHeadsToNearestSpot) {
  GridMap m = openWithSpots(5, 5, {{0, 0}, {4, 4}});
  DistanceCache cache(m);
  auto hist = historyOf({{0, {{3, 3}, {3, 3}}}});
  auto b = predictAstarGoal(hist, m, cache, 4);
  EXPECT_EQ(b.points.at(0).back(), (Point{4, 4}));
  EXPECT_EQ(b.points.at(0)[1], (Point{4, 4}));
}

TEST(PredictAstarGoal, HeadingSelectsSpotAhead) {
  GridMap m = openWithSpots(1, 9, {{0, 0}, {0, 8}});
  DistanceCache cache(m);
  // At (0,4), equidistant from both spots; moving right tips the choice.
  auto hist = historyOf({{0, {{0, 3}, {0, 4}}}});
  auto b = predictAstarGoal(hist, m, cache, 2);
  EXPECT_EQ(b.points.at(0), (std::vector<Point>{{0, 5}, {0, 6}}));
}

TEST(PredictAstarGoal, NeedsTwoObservations) {
  GridMap m = openWithSpots(3, 3, {{0, 0}});
  DistanceCache cache(m);
  auto hist = historyOf({{0, {{1, 1}}}});
  EXPECT_THROW(predictAstarGoal(hist, m, cache, 2), std::invalid_argument);
}

TEST(PredictAstarGoal, NoTaskSpotsFallsBackToConstant) {
  GridMap m = openWithSpots(3, 3, {});
  DistanceCache cache(m);
  auto hist = historyOf({{0, {{1, 0}, {1, 1}}}});
  EXPECT_EQ(predictAstarGoal(hist, m, cache, 3), predictConstant(hist, 3));
}

// Greedy assignment in id order picks, for agent 0, its closest spot and for
// agent 1 the closest of the rest. Equivalently it is the lexicographically
// smallest (d0, d1, ...) distance vector over all injective assignments,
// with ties resolved by row-major spot order.
TEST(PredictAstarGoal, GreedyAssignmentMatchesBruteForce) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    GridMap base = makeRandomMap(7, 7, 0.2, rng);
    std::vector<Coord> cells;
    for (int i : base.passableCells()) cells.push_back(base.coordOf(i));
    std::shuffle(cells.begin(), cells.end(), rng);
    std::vector<Coord> spots(cells.begin(), cells.begin() + 4);
    std::vector<std::uint8_t> mask(base.numCells());
    for (int i = 0; i < base.numCells(); ++i) mask[i] = base.passableIndex(i);
    GridMap m(base.width(), base.height(), mask, spots);
    DistanceCache cache(m);
    Coord a = cells[4];
    Coord b = cells[5];
    auto hist = historyOf({{0, {a, a}}, {1, {b, b}}});
    auto bundle = predictAstarGoal(hist, m, cache, 40);

    const auto& sorted = m.taskSpots();
    auto da = oracle::dijkstra(m, a);
    auto db = oracle::dijkstra(m, b);
    std::vector<int> perm(sorted.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::optional<std::tuple<int, int, int, int>> best;
    do {
      int d0 = da.count(sorted[perm[0]]) ? da[sorted[perm[0]]] : oracle::kInf;
      int d1 = db.count(sorted[perm[1]]) ? db[sorted[perm[1]]] : oracle::kInf;
      std::tuple<int, int, int, int> key{d0, perm[0], d1, perm[1]};
      if (!best || key < *best) best = key;
    } while (std::next_permutation(perm.begin(), perm.end()));
    auto [d0, s0, d1, s1] = *best;
    if (d0 < oracle::kInf) {
      EXPECT_EQ(bundle.points.at(0).back(), toPoint(sorted[s0])) << "trial " << trial;
    }
    if (d1 < oracle::kInf) {
      EXPECT_EQ(bundle.points.at(1).back(), toPoint(sorted[s1])) << "trial " << trial;
    }
  }
}

TEST(PredictAstarGoal, OutputsAreGraphFeasibleAndDeterministic) {
  GridMap m = makeWarehouse(WarehouseSize::kSmall);
  DistanceCache cache(m);
  std::mt19937_64 rng(2);
  const auto& cells = m.passableCells();
  for (int trial = 0; trial < 30; ++trial) {
    ObservationHistory hist;
    for (int id = 0; id < 5; ++id) {
      Coord c = m.coordOf(cells[rng() % cells.size()]);
      auto nbrs = m.neighbors(c);
      hist.set(id, {c, nbrs[rng() % nbrs.size()]}, 10);
    }
    auto b = predictAstarGoal(hist, m, cache, 10);
    EXPECT_EQ(b, predictAstarGoal(hist, m, cache, 10));
    for (const auto& [id, pts] : b.points) {
      ASSERT_EQ(pts.size(), 10u);
      Point prev = toPoint(hist.last(id));
      for (const Point& p : pts) {
        Coord c{static_cast<int>(p.row), static_cast<int>(p.col)};
        EXPECT_TRUE(m.passable(c));
        EXPECT_LE(std::abs(p.row - prev.row) + std::abs(p.col - prev.col), 1.0);
        prev = p;
      }
    }
  }
}

std::vector<std::string> stub(const std::string& mode, const std::string& extra = "") {
  std::vector<std::string> argv{STUB_PREDICTOR_PATH, mode};
  if (!extra.empty()) argv.push_back(extra);
  return argv;
}

TEST(ExternalPredictor, ConstantStubMatchesBuiltin) {
  GridMap m = openWithSpots(6, 6, {});
  ExternalPredictor p(stub("constant"), m);
  EXPECT_EQ(p.model(), "stub-constant");
  EXPECT_EQ(p.historyLength(), 4);
  auto hist = historyOf({{2, {{1, 1}, {1, 2}}}, {11, {{4, 4}, {5, 4}}}});
  for (int H : {1, 3, 5}) EXPECT_EQ(p.predict(hist, H), predictConstant(hist, H));
  p.shutdown();
  ASSERT_TRUE(WIFEXITED(p.exitStatus()));
  EXPECT_EQ(WEXITSTATUS(p.exitStatus()), 0);
}

TEST(ExternalPredictor, SchemaViolations) {
  GridMap m = openWithSpots(6, 6, {});
  auto hist = historyOf({{0, {{1, 1}, {1, 2}}}, {1, {{3, 3}, {3, 3}}}});
  for (const char* mode : {"short", "wrong-agents", "garbage", "error"}) {
    ExternalPredictor p(stub(mode), m);
    EXPECT_THROW(p.predict(hist, 4), PredictorSchemaError) << mode;
  }
  EXPECT_THROW(ExternalPredictor(stub("bad-hello"), m), PredictorSchemaError);
}

TEST(ExternalPredictor, TransportFailures) {
  GridMap m = openWithSpots(6, 6, {});
  auto hist = historyOf({{0, {{1, 1}, {1, 2}}}});
  ExternalPredictor p(stub("crash"), m);
  EXPECT_THROW(p.predict(hist, 2), PredictorTransportError);
  EXPECT_THROW(p.predict(hist, 2), PredictorTransportError);
  EXPECT_THROW(ExternalPredictor({"/nonexistent/predictor"}, m), PredictorTransportError);
}

TEST(ExternalPredictor, DeadlineMissThenRecovers) {
  GridMap m = openWithSpots(6, 6, {});
  auto hist = historyOf({{0, {{1, 1}, {1, 2}}}});
  ExternalPredictor p(stub("slow-once", "400"), m, 150ms);
  EXPECT_THROW(p.predict(hist, 2), PredictorDeadlineError);
  p.setDeadline(2000ms);
  auto later = historyOf({{0, {{1, 2}, {2, 2}}}});
  EXPECT_EQ(p.predict(later, 3), predictConstant(later, 3));
  EXPECT_THROW(ExternalPredictor(stub("silent"), m, 100ms, 200ms), PredictorDeadlineError);
}

TEST(ExternalPredictor, ClampsToMapBounds) {
  GridMap m = openWithSpots(2, 2, {});
  ExternalPredictor p(stub("constant"), m);
  // The stub echoes the history, which here lies outside a 2x2 map.
  ObservationHistory hist;
  hist.set(0, {{5, 7}}, 0);
  auto b = p.predict(hist, 1);
  EXPECT_EQ(b.points.at(0).front(), (Point{1, 1}));
}

}  // namespace
}  // namespace cpsolver
