#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpsolver/conformal.hpp"
#include "cpsolver/grid_world.hpp"
#include "cpsolver/mapf_core.hpp"
#include "cpsolver/prediction.hpp"
#include "json.hpp"

namespace cpsolver {

/// Vertices per horizon step that an uncontrolled agent may plausibly occupy.
struct IntervalVertexSets {
  struct Source {
    AgentId agent = 0;
    Point prediction;
    double radius = 0.0;
  };

  int start_time = 0;
  std::vector<std::vector<Coord>> steps;       // steps[h - 1], sorted
  std::vector<std::vector<Source>> provenance;  // provenance[h - 1], one per agent

  int horizon() const { return static_cast<int>(steps.size()); }
  const std::vector<Coord>& at(int h) const { return steps.at(h - 1); }
  bool contains(int h, const Coord& c) const {
    const auto& s = at(h);
    return std::binary_search(s.begin(), s.end(), c);
  }
};

/// For every step h, the union over agents b of the passable vertices v with
/// ||prediction_b(h) - v|| <= C_h and SP(current_b, v) <= h.
inline IntervalVertexSets discretize(const CPIntervals& intervals,
                                     const PredictionBundle& preds,
                                     const std::map<AgentId, Coord>& current, const GridMap& map,
                                     DistanceCache& cache) {
  const int H = preds.horizon;
  if (intervals.H != H || static_cast<int>(intervals.C.size()) != H) {
    throw std::invalid_argument("intervals and predictions disagree on the horizon");
  }
  IntervalVertexSets out;
  out.start_time = preds.issued_at;
  out.steps.resize(H);
  out.provenance.resize(H);
  std::vector<std::vector<std::uint8_t>> member(H, std::vector<std::uint8_t>(map.numCells(), 0));
  for (const auto& [id, points] : preds.points) {
    auto it = current.find(id);
    if (it == current.end()) throw std::invalid_argument("no current position for agent " + std::to_string(id));
    if (static_cast<int>(points.size()) != H) throw std::invalid_argument("prediction length differs from H");
    auto field = cache.from(it->second);
    for (int h = 1; h <= H; ++h) {
      const Point& p = points[h - 1];
      const double radius = intervals.C[h - 1];
      out.provenance[h - 1].push_back({id, p, radius});
      for (int cell : map.passableCells()) {
        int d = (*field)[cell];
        if (d == kUnreachable || d > h) continue;
        if (std::isfinite(radius)) {
          Coord v = map.coordOf(cell);
          double dr = p.row - v.row;
          double dc = p.col - v.col;
          if (std::sqrt(dr * dr + dc * dc) > radius) continue;
        }
        member[h - 1][cell] = 1;
      }
    }
  }
  for (int h = 0; h < H; ++h) {
    for (int cell : map.passableCells()) {
      if (member[h][cell]) out.steps[h].push_back(map.coordOf(cell));
    }
  }
  return out;
}

/// Passable cell nearest to a real-valued point; ties go to the row-major
/// first. Searches the 3x3 block around the rounded point.
inline std::optional<Coord> nearestCell(const GridMap& map, const Point& p) {
  Coord r{static_cast<int>(std::lround(p.row)), static_cast<int>(std::lround(p.col))};
  if (map.passable(r)) return r;
  std::optional<Coord> best;
  double best_d = 0.0;
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      Coord c{r.row + dr, r.col + dc};
      if (!map.passable(c)) continue;
      double d = std::hypot(p.row - c.row, p.col - c.col);
      if (!best || d < best_d || (d == best_d && c < *best)) {
        best = c;
        best_d = d;
      }
    }
  }
  return best;
}

/// Predicted trajectories as vertex paths from the current positions, for
/// use as conflict parties. Steps whose point has no nearby passable cell
/// repeat the previous vertex.
inline std::vector<Path> predictionPaths(const PredictionBundle& preds,
                                         const std::map<AgentId, Coord>& current,
                                         const GridMap& map) {
  std::vector<Path> out;
  for (const auto& [id, points] : preds.points) {
    Path p{id, preds.issued_at, {current.at(id)}};
    for (const Point& q : points) p.vertices.push_back(nearestCell(map, q).value_or(p.vertices.back()));
    out.push_back(std::move(p));
  }
  return out;
}

enum class Method { kIgnore, kObstacle, kPred, kCp };

inline std::string methodName(Method m) {
  switch (m) {
    case Method::kIgnore:
      return "IGNORE";
    case Method::kObstacle:
      return "OBSTACLE";
    case Method::kPred:
      return "PRED";
    case Method::kCp:
      return "CP";
  }
  return "?";
}

inline Method methodFromName(const std::string& s) {
  for (Method m : {Method::kIgnore, Method::kObstacle, Method::kPred, Method::kCp}) {
    if (methodName(m) == s) return m;
  }
  throw std::invalid_argument("unknown method '" + s + "'");
}

inline bool usesPredictions(Method m) { return m == Method::kPred || m == Method::kCp; }

/// What the solver gets to see about the uncontrolled agents in one window.
struct UncontrolledView {
  DynamicObstacleSet obstacles;
  std::vector<Path> predictions;
  std::optional<IntervalVertexSets> intervals;
  std::optional<PredictionBundle> bundle;
};

/// Builds the method-specific view. `bundle` is required for PRED and CP,
/// `intervals` for CP.
inline UncontrolledView buildView(Method method, const GridMap& map, DistanceCache& cache, int t,
                                  int H, const std::map<AgentId, Coord>& current,
                                  const std::optional<PredictionBundle>& bundle,
                                  const CPIntervals* intervals, BeyondHorizon policy) {
  UncontrolledView view;
  std::vector<Coord> now;
  for (const auto& [id, c] : current) now.push_back(c);
  if (current.empty()) return view;
  switch (method) {
    case Method::kIgnore:
      break;
    case Method::kObstacle:
      view.obstacles = DynamicObstacleSet(map, t, now, std::vector<std::vector<Coord>>(H, now), policy);
      break;
    case Method::kPred:
      if (!bundle) throw std::invalid_argument("PRED needs predictions");
      view.bundle = bundle;
      view.predictions = predictionPaths(*bundle, current, map);
      break;
    case Method::kCp: {
      if (!bundle || !intervals) throw std::invalid_argument("CP needs predictions and intervals");
      view.bundle = bundle;
      view.predictions = predictionPaths(*bundle, current, map);
      view.intervals = discretize(*intervals, *bundle, current, map, cache);
      std::vector<std::vector<Coord>> steps = view.intervals->steps;
      for (const Path& p : view.predictions) {
        for (int h = 1; h <= H; ++h) steps[h - 1].push_back(p.vertices[h]);
      }
      view.obstacles = DynamicObstacleSet(map, t, now, std::move(steps), policy);
      break;
    }
  }
  return view;
}

/// Source of uncontrolled agent positions. Implementations must not depend
/// on the controlled agents.
class UncontrolledWorld {
 public:
  virtual ~UncontrolledWorld() = default;
  virtual std::map<AgentId, Coord> positions() const = 0;
  virtual void step() = 0;
};

/// Replays recorded positions; the last frame repeats forever.
class TraceWorld : public UncontrolledWorld {
 public:
  explicit TraceWorld(std::vector<std::map<AgentId, Coord>> frames) : frames_(std::move(frames)) {
    if (frames_.empty()) frames_.emplace_back();
  }

  std::map<AgentId, Coord> positions() const override {
    return frames_[std::min(index_, frames_.size() - 1)];
  }
  void step() override { ++index_; }

 private:
  std::vector<std::map<AgentId, Coord>> frames_;
  std::size_t index_ = 0;
};

struct Collision {
  AgentId controlled = 0;
  AgentId uncontrolled = 0;
  ConflictKind kind = ConflictKind::kVertex;
  Coord where;

  friend bool operator==(const Collision&, const Collision&) = default;
};

/// Controlled/uncontrolled collisions during the step prev -> next: shared
/// vertex at the end of the step or a swap across one edge.
inline std::vector<Collision> collisionsBetween(const std::map<AgentId, Coord>& ctrl_prev,
                                                const std::map<AgentId, Coord>& ctrl_next,
                                                const std::map<AgentId, Coord>& unc_prev,
                                                const std::map<AgentId, Coord>& unc_next) {
  std::vector<Collision> out;
  for (const auto& [a, pa] : ctrl_next) {
    Coord qa = ctrl_prev.count(a) ? ctrl_prev.at(a) : pa;
    for (const auto& [b, pb] : unc_next) {
      Coord qb = unc_prev.count(b) ? unc_prev.at(b) : pb;
      if (pa == pb) {
        out.push_back({a, b, ConflictKind::kVertex, pa});
      } else if (qa != pa && qa == pb && qb == pa) {
        out.push_back({a, b, ConflictKind::kEdge, qa});
      }
    }
  }
  return out;
}

inline nlohmann::json toJson(const Collision& c) {
  return {{"controlled", c.controlled},
          {"uncontrolled", c.uncontrolled},
          {"kind", c.kind == ConflictKind::kVertex ? "vertex" : "edge"},
          {"at", toJson(c.where)}};
}

inline nlohmann::json positionsToJson(const std::map<AgentId, Coord>& pos) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, c] : pos) j[std::to_string(id)] = toJson(c);
  return j;
}

inline SolverConfig duaSolverConfig() {
  SolverConfig c;
  c.mode = SolverMode::kDuaEcbs;
  return c;
}

struct OpenLoopConfig {
  Method method = Method::kCp;
  SolverConfig solver = duaSolverConfig();
  BeyondHorizon policy = BeyondHorizon::kPersist;
};

struct OpenLoopResult {
  Solution solution;
  UncontrolledView view;
};

/// One-shot planning: predict once from the history, discretize, solve in
/// DUA-ECBS mode. Solver errors propagate.
inline OpenLoopResult solveOpenLoop(const GridMap& map, DistanceCache& cache,
                                    const std::vector<AgentTask>& controlled,
                                    const ObservationHistory& history, Predictor* predictor,
                                    const CPIntervals* intervals, const OpenLoopConfig& cfg) {
  const int t = history.empty() ? 0 : history.time();
  const int H = intervals ? intervals->H : 0;
  std::optional<PredictionBundle> bundle;
  auto current = history.current();
  if (usesPredictions(cfg.method) && !current.empty()) {
    if (!predictor) throw std::invalid_argument(methodName(cfg.method) + " needs a predictor");
    if (H < 1) throw std::invalid_argument("calibration artifact required for the horizon");
    bundle = predictor->predict(history, H);
  }
  if (cfg.method == Method::kObstacle && H < 1) {
    throw std::invalid_argument("OBSTACLE needs a horizon");
  }
  OpenLoopResult out;
  out.view = buildView(cfg.method, map, cache, t, H, current, bundle, intervals, cfg.policy);
  MapfInstance inst;
  inst.map = &map;
  inst.distances = &cache;
  inst.start_time = t;
  inst.agents = controlled;
  inst.obstacles = out.view.obstacles;
  inst.predictions = out.view.predictions;
  out.solution = solve(inst, cfg.solver);
  return out;
}

struct ClosedLoopConfig {
  Method method = Method::kCp;
  int H = 10;
  int w_hat = 10;
  int T_hat = 100;
  double w = 1.5;
  std::uint64_t seed = 0;
  int deadlock_cap = 10;
  int max_queue = 8;
  double window_budget_s = -1.0;  // negative selects H seconds
  double solver_time_budget_s = 100.0;
  BeyondHorizon policy = BeyondHorizon::kDrop;
  bool keep_plans = false;
};

struct WindowRecord {
  int t = 0;
  std::vector<AgentId> excluded;
  std::optional<bool> covered;  // true positions inside the interval sets at every step
  int collisions = 0;
  double runtime_s = 0.0;
  bool predictor_fallback = false;
  std::vector<Path> plans;  // only with keep_plans
  std::optional<IntervalVertexSets> intervals;  // only with keep_plans
};

struct MetricsRecord {
  double throughput = 0.0;
  int goals_reached = 0;
  int collisions = 0;
  bool violation = false;
  std::vector<int> collisions_per_step;
  std::vector<int> service_times;  // assignment-to-arrival per served goal
  int makespan = 0;                // one-shot runs
  double runtime_s = 0.0;
  std::vector<WindowRecord> windows;
  std::optional<double> coverage;  // fraction of covered windows
  int exclusions = 0;
  int realtime_violations = 0;
  int controlled_conflicts = 0;  // controlled-controlled collisions seen during execution
  int audit_problems = 0;        // findings of the independent rescan of each solution
  int solved_instances = 0;
  bool solve_failed = false;     // one-shot runs only
  bool deadlocked = false;
  std::string abort_reason;
};

inline nlohmann::json toJson(const MetricsRecord& m, bool timing = true) {
  nlohmann::json j = {{"throughput", m.throughput},
                      {"goals_reached", m.goals_reached},
                      {"collisions", m.collisions},
                      {"violation", m.violation},
                      {"service_times", m.service_times},
                      {"makespan", m.makespan},
                      {"runtime_s", timing ? m.runtime_s : 0.0},
                      {"exclusions", m.exclusions},
                      {"realtime_violations", timing ? m.realtime_violations : 0},
                      {"controlled_conflicts", m.controlled_conflicts},
                      {"audit_problems", m.audit_problems},
                      {"solve_failed", m.solve_failed},
                      {"deadlocked", m.deadlocked}};
  j["coverage"] = m.coverage ? nlohmann::json(*m.coverage) : nlohmann::json();
  if (!m.abort_reason.empty()) j["abort_reason"] = m.abort_reason;
  return j;
}

/// Goal sequence of one controlled agent. `assigned[k]` is the timestep at
/// which goals[k] was handed out.
struct GoalQueue {
  std::deque<Coord> goals;
  std::deque<int> assigned;
  int served = 0;
};

/// Rolling-horizon execution: every H steps observe, predict, discretize,
/// solve the windowed instance with conflict horizon w_hat, then execute H
/// steps against the true uncontrolled motion.
class ClosedLoopRunner {
 public:
  ClosedLoopRunner(const GridMap& map, DistanceCache& cache, std::vector<Coord> starts,
                   UncontrolledWorld& world, ObservationHistory history, Predictor* predictor,
                   const CPIntervals* intervals, ClosedLoopConfig cfg,
                   std::ostream* event_log = nullptr, Predictor* fallback = nullptr)
      : map_(map),
        cache_(cache),
        world_(world),
        history_(std::move(history)),
        predictor_(predictor),
        fallback_(fallback),
        intervals_(intervals),
        cfg_(cfg),
        log_(event_log),
        rng_(cfg.seed) {
    if (cfg_.H < 1 || cfg_.H > cfg_.w_hat) throw std::invalid_argument("need 1 <= H <= w_hat");
    if (cfg_.T_hat < 1 || cfg_.T_hat % cfg_.H != 0) {
      throw std::invalid_argument("T_hat must be a positive multiple of H");
    }
    if (cfg_.w < 1.0) throw std::invalid_argument("w must be >= 1");
    if (usesPredictions(cfg_.method) && !predictor_) {
      throw std::invalid_argument(methodName(cfg_.method) + " needs a predictor");
    }
    if (cfg_.method == Method::kCp) {
      if (!intervals_) throw std::invalid_argument("CP needs calibrated intervals");
      if (intervals_->H != cfg_.H) throw std::invalid_argument("intervals horizon differs from H");
    }
    for (std::size_t a = 0; a < starts.size(); ++a) {
      map_.requirePassable(starts[a]);
      pos_[static_cast<AgentId>(a)] = starts[a];
    }
    if (std::set<Coord>(starts.begin(), starts.end()).size() != starts.size()) {
      throw std::invalid_argument("controlled agents share a start");
    }
    queues_.resize(starts.size());
    excluded_streak_.assign(starts.size(), 0);
  }

  /// Pre-assigns goals instead of drawing them at random.
  void setGoals(AgentId a, std::vector<Coord> goals) {
    for (const Coord& g : goals) {
      map_.requirePassable(g);
      queues_.at(a).goals.push_back(g);
      queues_.at(a).assigned.push_back(0);
    }
  }

  MetricsRecord run() {
    auto started = Clock::now();
    const int n = static_cast<int>(pos_.size());
    MetricsRecord m;
    m.collisions_per_step.assign(cfg_.T_hat, 0);
    double budget = cfg_.window_budget_s < 0 ? cfg_.H * 1.0 : cfg_.window_budget_s;
    int covered_windows = 0;
    int scored_windows = 0;
    auto unc = world_.positions();
    if (history_.empty() || history_.time() != 0) history_.observe(0, unc);
    logStep(0, unc, {}, {}, {});

    for (int t = 0; t < cfg_.T_hat; t += cfg_.H) {
      WindowRecord win;
      win.t = t;
      auto w_started = Clock::now();
      topUpGoals(t);

      std::optional<PredictionBundle> bundle;
      if (usesPredictions(cfg_.method) && !unc.empty()) bundle = predict(win);
      UncontrolledView view = buildView(cfg_.method, map_, cache_, t, cfg_.H, unc, bundle,
                                        intervals_, cfg_.policy);
      std::vector<Path> plans = planWindow(t, view, win);
      win.runtime_s = seconds(Clock::now() - w_started);
      if (win.runtime_s > budget) ++m.realtime_violations;
      m.exclusions += static_cast<int>(win.excluded.size());

      bool deadlock = false;
      for (int a = 0; a < n; ++a) {
        bool ex = std::find(win.excluded.begin(), win.excluded.end(), a) != win.excluded.end();
        excluded_streak_[a] = ex ? excluded_streak_[a] + 1 : 0;
        deadlock |= excluded_streak_[a] > cfg_.deadlock_cap;
      }

      // Execute H steps.
      bool covered = true;
      for (int s = 1; s <= cfg_.H; ++s) {
        const int now = t + s;
        auto ctrl_prev = pos_;
        for (int a = 0; a < n; ++a) pos_[a] = plans[a].at(now);
        auto unc_prev = unc;
        world_.step();
        unc = world_.positions();
        history_.observe(now, unc);
        if (view.intervals) {
          for (const auto& [b, c] : unc) covered &= view.intervals->contains(s, c);
        }
        auto hits = collisionsBetween(ctrl_prev, pos_, unc_prev, unc);
        m.collisions_per_step[now - 1] = static_cast<int>(hits.size());
        m.collisions += static_cast<int>(hits.size());
        win.collisions += static_cast<int>(hits.size());
        m.controlled_conflicts += controlledConflicts(ctrl_prev, pos_);
        std::vector<AgentId> reached;
        for (int a = 0; a < n; ++a) {
          GoalQueue& q = queues_[a];
          if (!q.goals.empty() && q.goals.front() == pos_[a]) {
            m.service_times.push_back(now - q.assigned.front());
            q.goals.pop_front();
            q.assigned.pop_front();
            ++q.served;
            ++m.goals_reached;
            reached.push_back(a);
          }
        }
        logStep(now, unc, hits, win.excluded, reached);
      }
      if (view.intervals) {
        win.covered = covered;
        ++scored_windows;
        covered_windows += covered ? 1 : 0;
      }
      if (cfg_.keep_plans) {
        win.plans = std::move(plans);
        win.intervals = view.intervals;
      }
      m.windows.push_back(std::move(win));
      if (deadlock) {
        m.deadlocked = true;
        m.abort_reason = "an agent was excluded for more than " +
                         std::to_string(cfg_.deadlock_cap) + " consecutive windows";
        break;
      }
    }
    m.throughput = static_cast<double>(m.goals_reached) / cfg_.T_hat;
    m.violation = m.collisions > 0;
    if (scored_windows > 0) m.coverage = static_cast<double>(covered_windows) / scored_windows;
    m.runtime_s = seconds(Clock::now() - started);
    return m;
  }

  const std::vector<GoalQueue>& queues() const { return queues_; }

 private:
  using Clock = std::chrono::steady_clock;

  static double seconds(Clock::duration d) { return std::chrono::duration<double>(d).count(); }

  PredictionBundle predict(WindowRecord& win) {
    try {
      return predictor_->predict(history_, cfg_.H);
    } catch (const PredictorError&) {
      if (!fallback_) throw;
      win.predictor_fallback = true;
      return fallback_->predict(history_, cfg_.H);
    }
  }

  int queueLength(AgentId a) const {
    const GoalQueue& q = queues_[a];
    int total = 0;
    Coord from = pos_.at(a);
    for (const Coord& g : q.goals) {
      int d = cache_.distance(from, g);
      if (d == kUnreachable) return kUnreachable;
      total += d;
      from = g;
    }
    return total;
  }

  void topUpGoals(int t) {
    std::set<Coord> reserved;
    for (const GoalQueue& q : queues_) reserved.insert(q.goals.begin(), q.goals.end());
    for (AgentId a = 0; a < static_cast<AgentId>(queues_.size()); ++a) {
      GoalQueue& q = queues_[a];
      while (static_cast<int>(q.goals.size()) < cfg_.max_queue && queueLength(a) <= cfg_.H) {
        std::vector<Coord> pool;
        Coord tail = q.goals.empty() ? pos_.at(a) : q.goals.back();
        for (const Coord& c : map_.taskSpots()) {
          if (reserved.count(c) || c == tail) continue;
          bool occupied = false;
          for (const auto& [b, p] : pos_) occupied |= b != a && p == c;
          if (occupied || cache_.distance(tail, c) == kUnreachable) continue;
          pool.push_back(c);
        }
        if (pool.empty()) break;
        Coord g = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng_)];
        q.goals.push_back(g);
        q.assigned.push_back(t);
        reserved.insert(g);
      }
    }
  }

  /// Solves the window, excluding agents whose low level fails until the
  /// rest is solvable. Excluded agents hold position.
  std::vector<Path> planWindow(int t, const UncontrolledView& view, WindowRecord& win) {
    const int n = static_cast<int>(pos_.size());
    std::vector<bool> excluded(n, false);
    for (;;) {
      MapfInstance inst;
      inst.map = &map_;
      inst.distances = &cache_;
      inst.start_time = t;
      inst.obstacles = view.obstacles;
      inst.predictions = view.predictions;
      for (int a = 0; a < n; ++a) {
        if (excluded[a]) {
          inst.static_obstacles.push_back(pos_[a]);
          continue;
        }
        const GoalQueue& q = queues_[a];
        AgentTask task{pos_[a], {q.goals.begin(), q.goals.end()}};
        if (task.goals.empty()) task.goals.push_back(pos_[a]);
        inst.agents.push_back(task);
        inst.ids.push_back(a);
        inst.reserved.push_back({q.goals.begin(), q.goals.end()});
      }
      std::vector<Path> plans(n);
      for (int a = 0; a < n; ++a) {
        if (excluded[a]) plans[a] = Path{a, t, {pos_[a]}};
      }
      if (inst.agents.empty()) return plans;
      SolverConfig sc;
      sc.mode = SolverMode::kDuaEcbs;
      sc.w = cfg_.w;
      sc.conflict_horizon = cfg_.w_hat;
      sc.time_budget_s = cfg_.solver_time_budget_s;
      try {
        Solution sol = solve(inst, sc);
        ++solved_;
        audit_problems_ += static_cast<int>(
            auditSolution(map_, sol.paths, view.obstacles, {t, cfg_.w_hat}).size());
        for (const Path& p : sol.paths) plans[p.agent] = p;
        return plans;
      } catch (const SearchExhausted& e) {
        excluded[e.agent()] = true;
        win.excluded.push_back(e.agent());
      } catch (const std::runtime_error&) {
        // Budget or unsolvable: every remaining agent holds this window.
        for (int id : inst.ids) {
          excluded[id] = true;
          win.excluded.push_back(id);
        }
      }
    }
  }

  int controlledConflicts(const std::map<AgentId, Coord>& prev,
                          const std::map<AgentId, Coord>& next) const {
    int count = 0;
    for (auto i = next.begin(); i != next.end(); ++i) {
      for (auto j = std::next(i); j != next.end(); ++j) {
        if (i->second == j->second) ++count;
        Coord pi = prev.at(i->first);
        Coord pj = prev.at(j->first);
        if (pi != i->second && pi == j->second && pj == i->second) ++count;
      }
    }
    return count;
  }

  void logStep(int t, const std::map<AgentId, Coord>& unc, const std::vector<Collision>& hits,
               const std::vector<AgentId>& excluded, const std::vector<AgentId>& reached) {
    if (!log_) return;
    nlohmann::json cols = nlohmann::json::array();
    for (const Collision& c : hits) cols.push_back(toJson(c));
    nlohmann::json rec = {{"t", t},
                          {"controlled", positionsToJson(pos_)},
                          {"uncontrolled", positionsToJson(unc)},
                          {"collisions", cols},
                          {"excluded", excluded},
                          {"reached", reached}};
    *log_ << rec.dump() << "\n";
  }

  const GridMap& map_;
  DistanceCache& cache_;
  UncontrolledWorld& world_;
  ObservationHistory history_;
  Predictor* predictor_;
  Predictor* fallback_;
  const CPIntervals* intervals_;
  ClosedLoopConfig cfg_;
  std::ostream* log_;
  std::mt19937_64 rng_;
  std::map<AgentId, Coord> pos_;
  std::vector<GoalQueue> queues_;
  std::vector<int> excluded_streak_;
  int solved_ = 0;
  int audit_problems_ = 0;

 public:
  int solvedInstances() const { return solved_; }
  int auditProblems() const { return audit_problems_; }
};

inline MetricsRecord runClosedLoop(const GridMap& map, DistanceCache& cache,
                                   std::vector<Coord> starts, UncontrolledWorld& world,
                                   ObservationHistory history, Predictor* predictor,
                                   const CPIntervals* intervals, const ClosedLoopConfig& cfg,
                                   std::ostream* event_log = nullptr,
                                   Predictor* fallback = nullptr) {
  ClosedLoopRunner runner(map, cache, std::move(starts), world, std::move(history), predictor,
                          intervals, cfg, event_log, fallback);
  MetricsRecord m = runner.run();
  m.solved_instances = runner.solvedInstances();
  m.audit_problems = runner.auditProblems();
  return m;
}

/// Recomputes goal and collision totals from an event log.
inline MetricsRecord replayEventLog(std::istream& in, int T_hat) {
  MetricsRecord m;
  m.collisions_per_step.assign(T_hat, 0);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    int t = j.at("t").get<int>();
    int hits = static_cast<int>(j.at("collisions").size());
    if (t >= 1 && t <= T_hat) m.collisions_per_step[t - 1] = hits;
    m.collisions += hits;
    m.goals_reached += static_cast<int>(j.value("reached", nlohmann::json::array()).size());
  }
  m.throughput = static_cast<double>(m.goals_reached) / T_hat;
  m.violation = m.collisions > 0;
  return m;
}

}  // namespace cpsolver
