#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cpsolver/grid_world.hpp"
#include "json.hpp"

namespace cpsolver {

using AgentId = int;

/// Time-indexed vertex sequence. Before start_time and after the last vertex
/// the agent is assumed to sit at the first/last vertex respectively.
struct Path {
  AgentId agent = 0;
  int start_time = 0;
  std::vector<Coord> vertices;

  int endTime() const { return start_time + static_cast<int>(vertices.size()) - 1; }

  /// Service time: number of edges, wait edges included.
  int cost() const { return vertices.empty() ? 0 : static_cast<int>(vertices.size()) - 1; }

  Coord at(int t) const {
    if (t <= start_time) return vertices.front();
    if (t >= endTime()) return vertices.back();
    return vertices[t - start_time];
  }

  bool covers(int t) const { return t >= start_time && t <= endTime(); }

  friend bool operator==(const Path&, const Path&) = default;
};

enum class ConstraintKind { kVertex, kEdge };

/// Vertex constraint: the agent may not occupy `from` at `time`.
/// Edge constraint: the agent may not move from `from` to `to` between `time`
/// and `time + 1`.
struct Constraint {
  AgentId agent = 0;
  ConstraintKind kind = ConstraintKind::kVertex;
  Coord from;
  Coord to;
  int time = 0;

  static Constraint vertex(AgentId agent, Coord at, int time) {
    return {agent, ConstraintKind::kVertex, at, at, time};
  }
  static Constraint edge(AgentId agent, Coord from, Coord to, int time) {
    return {agent, ConstraintKind::kEdge, from, to, time};
  }

  friend auto operator<=>(const Constraint&, const Constraint&) = default;
};

enum class ConflictKind { kVertex, kEdge };

enum class PartyKind { kControlled, kPrediction, kIntervalVertex };

struct Party {
  PartyKind kind = PartyKind::kControlled;
  int id = 0;  // agent index for controlled/prediction parties, -1 for interval vertices

  bool controlled() const { return kind == PartyKind::kControlled; }
  friend auto operator<=>(const Party&, const Party&) = default;
};

/// A detected conflict. For edge conflicts `first` traverses
/// location -> location2 between `time` and `time + 1` and `second` traverses
/// the same edge in the opposite direction.
struct Conflict {
  ConflictKind kind = ConflictKind::kVertex;
  Party first;
  Party second;
  Coord location;
  Coord location2;
  int time = 0;

  friend bool operator==(const Conflict&, const Conflict&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Conflict& c) {
  auto party = [](const Party& p) {
    switch (p.kind) {
      case PartyKind::kControlled: return "a" + std::to_string(p.id);
      case PartyKind::kPrediction: return "u" + std::to_string(p.id);
      case PartyKind::kIntervalVertex: return std::string("interval");
    }
    return std::string();
  };
  os << (c.kind == ConflictKind::kVertex ? "vertex" : "edge") << " conflict "
     << party(c.first) << "/" << party(c.second) << " at " << c.location;
  if (c.kind == ConflictKind::kEdge) os << "->" << c.location2;
  return os << " t=" << c.time;
}

/// Agents that receive a constraint for a conflict: none when both parties
/// are uncontrolled, the controlled party when exactly one is, both otherwise.
inline std::vector<int> classifyConflict(const Conflict& c) {
  bool a = c.first.controlled();
  bool b = c.second.controlled();
  if (a && b) return {c.first.id, c.second.id};
  if (a) return {c.first.id};
  if (b) return {c.second.id};
  return {};
}

/// The constraint that resolves `c` for the controlled agent `recipient`.
inline Constraint constraintFor(const Conflict& c, int recipient) {
  bool is_first = c.first.controlled() && c.first.id == recipient;
  if (!is_first && !(c.second.controlled() && c.second.id == recipient)) {
    throw std::invalid_argument("recipient is not a controlled party of the conflict");
  }
  if (c.kind == ConflictKind::kVertex) {
    return Constraint::vertex(recipient, c.location, c.time);
  }
  return is_first ? Constraint::edge(recipient, c.location, c.location2, c.time)
                  : Constraint::edge(recipient, c.location2, c.location, c.time);
}

enum class BeyondHorizon { kPersist, kDrop };

/// Per-timestep forbidden vertices for start_time+1 .. start_time+H, plus the
/// current uncontrolled positions at start_time which only take part in the
/// swap rule: a move u->v during [t, t+1] is forbidden when v is occupied at t
/// and u at t+1.
class DynamicObstacleSet {
 public:
  DynamicObstacleSet() = default;

  DynamicObstacleSet(const GridMap& map, int start_time, std::vector<Coord> current,
                     std::vector<std::vector<Coord>> steps,
                     BeyondHorizon policy = BeyondHorizon::kPersist)
      : start_time_(start_time), num_cells_(map.numCells()), policy_(policy) {
    layers_.reserve(steps.size() + 1);
    layers_.push_back(normalize(map, std::move(current)));
    for (auto& s : steps) layers_.push_back(normalize(map, std::move(s)));
    masks_.assign(layers_.size(), std::vector<std::uint8_t>(num_cells_, 0));
    last_blocked_.assign(num_cells_, -1);
    for (std::size_t h = 0; h < layers_.size(); ++h) {
      for (const Coord& c : layers_[h]) {
        int i = map.index(c);
        masks_[h][i] = 1;
        if (h > 0) last_blocked_[i] = start_time_ + static_cast<int>(h);
      }
    }
    if (policy_ == BeyondHorizon::kPersist && horizon() > 0) {
      for (const Coord& c : layers_.back()) last_blocked_[map.index(c)] = kForever;
    }
  }

  static constexpr int kForever = std::numeric_limits<int>::max();

  bool empty() const { return horizon() == 0; }
  int startTime() const { return start_time_; }
  int horizon() const { return layers_.empty() ? 0 : static_cast<int>(layers_.size()) - 1; }
  BeyondHorizon policy() const { return policy_; }

  /// Forbidden vertices at start_time + h for h in 1..H; h = 0 gives the
  /// current positions.
  const std::vector<Coord>& step(int h) const { return layers_.at(h); }

  bool blocked(int cell, int t) const {
    int h = t - start_time_;
    if (empty() || h < 1) return false;
    if (h <= horizon()) return masks_[h][cell] != 0;
    return policy_ == BeyondHorizon::kPersist && masks_[horizon()][cell] != 0;
  }

  bool blocksMove(int from, int to, int t) const {
    if (from == to || empty()) return false;
    return occupied(to, t) && blocked(from, t + 1);
  }

  /// Last timestep at which `cell` is forbidden; -1 if never, kForever if the
  /// final layer persists.
  int lastBlockedTime(int cell) const {
    return last_blocked_.empty() ? -1 : last_blocked_[cell];
  }

  /// After this time blocked() no longer depends on t.
  int lastDynamicTime() const { return empty() ? -1 : start_time_ + horizon(); }

 private:
  bool occupied(int cell, int t) const {
    if (t == start_time_) return masks_[0][cell] != 0;
    return blocked(cell, t);
  }

  static std::vector<Coord> normalize(const GridMap& map, std::vector<Coord> cells) {
    for (const Coord& c : cells) map.requirePassable(c);
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    return cells;
  }

  int start_time_ = 0;
  int num_cells_ = 0;
  BeyondHorizon policy_ = BeyondHorizon::kPersist;
  std::vector<std::vector<Coord>> layers_;
  std::vector<std::vector<std::uint8_t>> masks_;
  std::vector<int> last_blocked_;
};

/// Occupancy counts of other agents' paths, used as the focal measure of the
/// low-level search.
class ConflictTable {
 public:
  explicit ConflictTable(const GridMap& map) : map_(&map) {}

  /// `pad` keeps the path's last vertex occupied forever (controlled agents
  /// wait at their goal); predictions are not padded.
  void addPath(const Path& path, bool pad) {
    if (path.vertices.empty()) return;
    for (int t = path.start_time; t <= path.endTime(); ++t) {
      int cell = map_->index(path.at(t));
      if (!(pad && t == path.endTime())) ++vertex_[vertexKey(cell, t)];
      if (t < path.endTime()) {
        int next = map_->index(path.at(t + 1));
        if (next != cell) ++edge_[edgeKey(cell, next, t)];
      }
    }
    if (pad) parked_[map_->index(path.vertices.back())].push_back(path.endTime());
    last_time_ = std::max(last_time_, path.endTime());
  }

  int vertexCount(int cell, int t) const {
    int count = 0;
    if (auto it = vertex_.find(vertexKey(cell, t)); it != vertex_.end()) count += it->second;
    if (auto it = parked_.find(cell); it != parked_.end()) {
      for (int since : it->second) count += since <= t ? 1 : 0;
    }
    return count;
  }

  /// Paths moving `to -> from` during [t, t+1]: a swap with a move from -> to.
  int swapCount(int from, int to, int t) const {
    if (from == to) return 0;
    auto it = edge_.find(edgeKey(to, from, t));
    return it == edge_.end() ? 0 : it->second;
  }

  int lastTime() const { return last_time_; }

 private:
  static std::uint64_t vertexKey(int cell, int t) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) << 32) |
           static_cast<std::uint32_t>(cell);
  }
  static std::uint64_t edgeKey(int from, int to, int t) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) << 42) |
           (static_cast<std::uint64_t>(from) << 21) | static_cast<std::uint64_t>(to);
  }

  const GridMap* map_;
  std::unordered_map<std::uint64_t, int> vertex_;
  std::unordered_map<std::uint64_t, int> edge_;
  std::unordered_map<int, std::vector<int>> parked_;
  int last_time_ = -1;
};

/// The low-level search proved that no path exists within its timestep cap.
class SearchExhausted : public std::runtime_error {
 public:
  explicit SearchExhausted(AgentId agent, const std::string& what = "")
      : std::runtime_error("no path for agent " + std::to_string(agent) +
                           (what.empty() ? "" : ": " + what)),
        agent_(agent) {}
  AgentId agent() const { return agent_; }

 private:
  AgentId agent_;
};

class UnsolvableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BudgetExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LowLevelRequest {
  const GridMap* map = nullptr;
  DistanceCache* distances = nullptr;
  AgentId agent = 0;
  Coord start;
  std::vector<Coord> goals;  // visited in order; usually one
  int start_time = 0;
  const std::vector<Constraint>* constraints = nullptr;  // this agent's only
  const DynamicObstacleSet* obstacles = nullptr;
  const std::vector<std::uint8_t>* static_blocked = nullptr;  // indexed by cell
  const ConflictTable* conflicts = nullptr;
  double w = 1.0;
  std::optional<int> horizon;  // conflict horizon, relative to start_time
  int timestep_cap = 0;        // 0 selects 4 * |V|
};

struct LowLevelResult {
  Path path;
  int f_min = 0;
  int conflicts = 0;
  std::size_t expanded = 0;
};

namespace detail {

/// Focal A* over (cell, time, goal label) states.
class FocalAStar {
 public:
  explicit FocalAStar(const LowLevelRequest& req) : req_(req), map_(*req.map) {}

  std::optional<LowLevelResult> run() {
    map_.requirePassable(req_.start);
    if (req_.goals.empty()) throw std::invalid_argument("low-level search needs a goal");
    for (const Coord& g : req_.goals) map_.requirePassable(g);
    if (req_.w < 1.0) throw std::invalid_argument("suboptimality factor must be >= 1");

    prepare();
    int start = map_.index(req_.start);
    int label = advanceLabel(0, start);
    int h0 = heuristic(start, label);
    if (h0 == kUnreachable) return std::nullopt;

    open_ = OpenSet(OpenCmp{&nodes_});
    focal_ = FocalSet(FocalCmp{&nodes_});
    int root = newNode(start, req_.start_time, label, 0, h0, 0, -1);
    insertOpen(root);
    best_f_ = nodes_[root].f;
    focal_.insert(root);
    nodes_[root].in_focal = true;

    std::size_t expanded = 0;
    while (!open_.empty()) {
      int idx = *focal_.begin();
      eraseOpen(idx);
      ++expanded;
      Node cur = nodes_[idx];
      if (isTerminal(cur)) {
        LowLevelResult result;
        result.path = buildPath(idx);
        result.f_min = best_f_;
        result.conflicts = cur.conflicts;
        result.expanded = expanded;
        return result;
      }
      if (cur.g < cap_) expand(idx);
      if (open_.empty()) break;
      int new_best = nodes_[*open_.begin()].f;
      if (new_best > best_f_) {
        double old_bound = bound(best_f_);
        double new_bound = bound(new_best);
        for (int n : open_) {
          double f = nodes_[n].f;
          if (f > new_bound) break;
          if (f > old_bound && !nodes_[n].in_focal) {
            focal_.insert(n);
            nodes_[n].in_focal = true;
          }
        }
        best_f_ = new_best;
      }
      if (focal_.empty()) {
        // Only possible through floating-point bound drift; re-seed.
        focal_.insert(*open_.begin());
        nodes_[*open_.begin()].in_focal = true;
      }
    }
    return std::nullopt;
  }

 private:
  struct Node {
    int cell;
    int time;
    int label;
    int g;
    int f;
    int conflicts;
    int parent;
    bool in_open = false;
    bool in_focal = false;
  };

  struct OpenCmp {
    const std::vector<Node>* nodes;
    bool operator()(int a, int b) const {
      const Node& x = (*nodes)[a];
      const Node& y = (*nodes)[b];
      if (x.f != y.f) return x.f < y.f;
      if (x.g != y.g) return x.g > y.g;
      if (x.cell != y.cell) return x.cell < y.cell;
      if (x.label != y.label) return x.label < y.label;
      return a < b;
    }
  };

  struct FocalCmp {
    const std::vector<Node>* nodes;
    bool operator()(int a, int b) const {
      const Node& x = (*nodes)[a];
      const Node& y = (*nodes)[b];
      if (x.conflicts != y.conflicts) return x.conflicts < y.conflicts;
      return OpenCmp{nodes}(a, b);
    }
  };

  using OpenSet = std::set<int, OpenCmp>;
  using FocalSet = std::set<int, FocalCmp>;

  double bound(int f) const { return req_.w * f + 1e-9; }

  bool enforced(int t) const { return !horizon_end_ || t <= *horizon_end_; }

  void prepare() {
    int num_goals = static_cast<int>(req_.goals.size());
    goal_cells_.clear();
    goal_fields_.clear();
    for (const Coord& g : req_.goals) {
      goal_cells_.push_back(map_.index(g));
      goal_fields_.push_back(req_.distances->from(g));
    }
    suffix_.assign(num_goals + 1, 0);
    for (int k = num_goals - 2; k >= 0; --k) {
      int d = (*goal_fields_[k + 1])[goal_cells_[k]];
      suffix_[k] = d == kUnreachable || suffix_[k + 1] == kUnreachable ? kUnreachable
                                                                       : d + suffix_[k + 1];
    }
    if (req_.horizon) horizon_end_ = req_.start_time + *req_.horizon;

    int last_dynamic = req_.start_time;
    vertex_constraints_.clear();
    edge_constraints_.clear();
    int final_goal = goal_cells_.back();
    int goal_last_blocked = -1;
    if (req_.constraints) {
      for (const Constraint& c : *req_.constraints) {
        if (c.kind == ConstraintKind::kVertex) {
          int cell = map_.index(c.from);
          vertex_constraints_.insert(key(cell, c.time));
          if (cell == final_goal) goal_last_blocked = std::max(goal_last_blocked, c.time);
        } else {
          edge_constraints_.insert(edgeKey(map_.index(c.from), map_.index(c.to), c.time));
        }
        last_dynamic = std::max(last_dynamic, c.time + 1);
      }
    }
    if (req_.obstacles && !req_.obstacles->empty()) {
      last_dynamic = std::max(last_dynamic, req_.obstacles->lastDynamicTime() + 1);
      goal_last_blocked =
          std::max(goal_last_blocked, req_.obstacles->lastBlockedTime(final_goal));
    }
    if (req_.conflicts) last_dynamic = std::max(last_dynamic, req_.conflicts->lastTime() + 1);
    if (horizon_end_) {
      last_dynamic = std::min(last_dynamic, *horizon_end_);
      if (goal_last_blocked > *horizon_end_) goal_last_blocked = *horizon_end_;
    }
    static_time_ = last_dynamic;
    goal_free_from_ = goal_last_blocked == DynamicObstacleSet::kForever
                          ? DynamicObstacleSet::kForever
                          : goal_last_blocked + 1;
    cap_ = req_.timestep_cap > 0 ? req_.timestep_cap : 4 * map_.numPassable();
  }

  static std::uint64_t key(int cell, int t) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) << 32) |
           static_cast<std::uint32_t>(cell);
  }
  static std::uint64_t edgeKey(int from, int to, int t) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) << 42) |
           (static_cast<std::uint64_t>(from) << 21) | static_cast<std::uint64_t>(to);
  }
  static std::uint64_t stateKey(int cell, int t, int label) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) << 32) |
           (static_cast<std::uint64_t>(label) << 24) | static_cast<std::uint32_t>(cell);
  }

  int advanceLabel(int label, int cell) const {
    while (label < static_cast<int>(goal_cells_.size()) && goal_cells_[label] == cell) ++label;
    return label;
  }

  int heuristic(int cell, int label) const {
    if (label >= static_cast<int>(goal_cells_.size())) {
      // Past the last goal: distance back to it.
      return (*goal_fields_.back())[cell];
    }
    int d = (*goal_fields_[label])[cell];
    if (d == kUnreachable || suffix_[label] == kUnreachable) return kUnreachable;
    return d + suffix_[label];
  }

  bool isTerminal(const Node& n) const {
    if (horizon_end_ && n.time >= *horizon_end_) return true;
    return n.label == static_cast<int>(goal_cells_.size()) &&
           n.cell == goal_cells_.back() && n.time >= goal_free_from_;
  }

  bool allowed(int from, int to, int t) const {
    if (from != to && req_.static_blocked && (*req_.static_blocked)[to]) return false;
    if (!enforced(t + 1)) return true;
    if (vertex_constraints_.count(key(to, t + 1))) return false;
    if (edge_constraints_.count(edgeKey(from, to, t))) return false;
    if (req_.obstacles) {
      if (req_.obstacles->blocked(to, t + 1)) return false;
      if (req_.obstacles->blocksMove(from, to, t)) return false;
    }
    return true;
  }

  int conflictDelta(int from, int to, int t) const {
    if (!req_.conflicts || !enforced(t + 1)) return 0;
    return req_.conflicts->vertexCount(to, t + 1) + req_.conflicts->swapCount(from, to, t);
  }

  int newNode(int cell, int time, int label, int g, int h, int conflicts, int parent) {
    nodes_.push_back(Node{cell, time, label, g, g + h, conflicts, parent});
    int idx = static_cast<int>(nodes_.size()) - 1;
    index_.emplace(stateKey(cell, std::min(time, static_time_), label), idx);
    return idx;
  }

  void insertOpen(int idx) {
    open_.insert(idx);
    nodes_[idx].in_open = true;
  }

  void eraseOpen(int idx) {
    if (nodes_[idx].in_focal) {
      focal_.erase(idx);
      nodes_[idx].in_focal = false;
    }
    if (nodes_[idx].in_open) {
      open_.erase(idx);
      nodes_[idx].in_open = false;
    }
  }

  void expand(int idx) {
    const int cell = nodes_[idx].cell;
    const int t = nodes_[idx].time;
    const int label = nodes_[idx].label;
    const int g = nodes_[idx].g;
    const int conflicts = nodes_[idx].conflicts;
    const double focal_bound = bound(best_f_);
    map_.forEachNeighbor(cell, [&](int next) {
      if (!allowed(cell, next, t)) return;
      int next_label = advanceLabel(label, next);
      int h = heuristic(next, next_label);
      if (h == kUnreachable) return;
      int ng = g + 1;
      int nc = conflicts + conflictDelta(cell, next, t);
      auto it = index_.find(stateKey(next, std::min(t + 1, static_time_), next_label));
      int target;
      if (it == index_.end()) {
        target = newNode(next, t + 1, next_label, ng, h, nc, idx);
      } else {
        target = it->second;
        Node& n = nodes_[target];
        if (!(ng < n.g || (ng == n.g && nc < n.conflicts))) return;
        eraseOpen(target);
        n.time = t + 1;
        n.g = ng;
        n.f = ng + h;
        n.conflicts = nc;
        n.parent = idx;
      }
      insertOpen(target);
      if (nodes_[target].f <= focal_bound) {
        focal_.insert(target);
        nodes_[target].in_focal = true;
      }
    });
  }

  Path buildPath(int idx) const {
    std::vector<Coord> rev;
    int last_label = nodes_[idx].label;
    int last_cell = nodes_[idx].cell;
    for (int i = idx; i != -1; i = nodes_[i].parent) rev.push_back(map_.coordOf(nodes_[i].cell));
    Path path;
    path.agent = req_.agent;
    path.start_time = req_.start_time;
    path.vertices.assign(rev.rbegin(), rev.rend());
    // Unconstrained completion beyond the conflict horizon.
    int num_goals = static_cast<int>(goal_cells_.size());
    auto append = [&](int goal_index, int from_cell) {
      auto leg = descend(map_, *goal_fields_[goal_index], map_.coordOf(from_cell));
      path.vertices.insert(path.vertices.end(), leg.begin() + 1, leg.end());
    };
    if (last_label < num_goals) {
      int from = last_cell;
      for (int k = last_label; k < num_goals; ++k) {
        append(k, from);
        from = goal_cells_[k];
      }
    } else if (last_cell != goal_cells_.back()) {
      append(num_goals - 1, last_cell);
    }
    return path;
  }

  const LowLevelRequest& req_;
  const GridMap& map_;
  std::vector<int> goal_cells_;
  std::vector<std::shared_ptr<const DistanceField>> goal_fields_;
  std::vector<int> suffix_;
  std::optional<int> horizon_end_;
  std::unordered_set<std::uint64_t> vertex_constraints_;
  std::unordered_set<std::uint64_t> edge_constraints_;
  int static_time_ = 0;
  int goal_free_from_ = 0;
  int cap_ = 0;
  int best_f_ = 0;
  std::vector<Node> nodes_;
  std::unordered_map<std::uint64_t, int> index_;
  OpenSet open_{OpenCmp{nullptr}};
  FocalSet focal_{FocalCmp{nullptr}};
};

}  // namespace detail

inline std::optional<LowLevelResult> tryLowLevelSearch(const LowLevelRequest& req) {
  return detail::FocalAStar(req).run();
}

/// Constrained focal A*. Returns a path of cost <= w * f_min that avoids every
/// constraint and obstacle inside the conflict horizon; throws SearchExhausted
/// when none exists within the timestep cap.
inline LowLevelResult lowLevelSearch(const LowLevelRequest& req) {
  auto result = tryLowLevelSearch(req);
  if (!result) throw SearchExhausted(req.agent);
  return *result;
}

/// Convenience form building the conflict table from `other_paths`.
inline LowLevelResult lowLevelSearch(const GridMap& map, DistanceCache& distances,
                                     AgentId agent, Coord start, Coord goal,
                                     const std::vector<Constraint>& constraints,
                                     const DynamicObstacleSet& obstacles,
                                     const std::vector<Path>& other_paths, double w,
                                     std::optional<int> horizon = std::nullopt,
                                     int start_time = 0) {
  ConflictTable table(map);
  for (const Path& p : other_paths) table.addPath(p, true);
  LowLevelRequest req;
  req.map = &map;
  req.distances = &distances;
  req.agent = agent;
  req.start = start;
  req.goals = {goal};
  req.start_time = start_time;
  req.constraints = &constraints;
  req.obstacles = &obstacles;
  req.conflicts = &table;
  req.w = w;
  req.horizon = horizon;
  return lowLevelSearch(req);
}

struct ConflictScope {
  int start_time = 0;
  std::optional<int> horizon;  // conflicts are checked for t <= start_time + horizon

  bool inScope(int t) const { return !horizon || t <= start_time + *horizon; }
};

namespace detail {

inline int scanEnd(const std::vector<Path>& paths, const std::vector<Path>& predictions,
                   const DynamicObstacleSet& obstacles, const ConflictScope& scope) {
  int end = scope.start_time;
  for (const Path& p : paths) end = std::max(end, p.endTime());
  for (const Path& p : predictions) end = std::max(end, p.endTime());
  if (!obstacles.empty()) end = std::max(end, obstacles.lastDynamicTime() + 1);
  if (scope.horizon) end = std::min(end, scope.start_time + *scope.horizon);
  return end;
}

/// Every conflict at exactly timestep t: vertex conflicts at t and edge
/// conflicts over [t, t+1] (the latter only when t+1 is in scope).
inline void conflictsAt(const GridMap& map, const std::vector<Path>& paths,
                        const std::vector<Path>& predictions,
                        const DynamicObstacleSet& obstacles, const ConflictScope& scope,
                        int t, std::vector<Conflict>& out) {
  const int n = static_cast<int>(paths.size());
  const Party interval{PartyKind::kIntervalVertex, -1};
  if (t > scope.start_time) {
    for (int i = 0; i < n; ++i) {
      Coord a = paths[i].at(t);
      for (int j = i + 1; j < n; ++j) {
        if (a == paths[j].at(t)) {
          out.push_back({ConflictKind::kVertex, {PartyKind::kControlled, i},
                         {PartyKind::kControlled, j}, a, a, t});
        }
      }
      for (int b = 0; b < static_cast<int>(predictions.size()); ++b) {
        const Path& pred = predictions[b];
        if (pred.covers(t) && pred.at(t) == a) {
          out.push_back({ConflictKind::kVertex, {PartyKind::kControlled, i},
                         {PartyKind::kPrediction, b}, a, a, t});
        }
      }
      if (obstacles.blocked(map.index(a), t)) {
        out.push_back({ConflictKind::kVertex, {PartyKind::kControlled, i}, interval, a, a, t});
      }
    }
  }
  if (!scope.inScope(t + 1)) return;
  for (int i = 0; i < n; ++i) {
    Coord a0 = paths[i].at(t);
    Coord a1 = paths[i].at(t + 1);
    if (a0 == a1) continue;
    for (int j = i + 1; j < n; ++j) {
      if (paths[j].at(t) == a1 && paths[j].at(t + 1) == a0) {
        out.push_back({ConflictKind::kEdge, {PartyKind::kControlled, i},
                       {PartyKind::kControlled, j}, a0, a1, t});
      }
    }
    for (int b = 0; b < static_cast<int>(predictions.size()); ++b) {
      const Path& pred = predictions[b];
      if (pred.covers(t) && pred.covers(t + 1) && pred.at(t) == a1 && pred.at(t + 1) == a0) {
        out.push_back({ConflictKind::kEdge, {PartyKind::kControlled, i},
                       {PartyKind::kPrediction, b}, a0, a1, t});
      }
    }
    if (obstacles.blocksMove(map.index(a0), map.index(a1), t)) {
      out.push_back({ConflictKind::kEdge, {PartyKind::kControlled, i}, interval, a0, a1, t});
    }
  }
}

inline bool conflictLess(const Conflict& x, const Conflict& y) {
  if (x.first != y.first) return x.first < y.first;
  if (x.second != y.second) return x.second < y.second;
  return x.kind < y.kind;
}

}  // namespace detail

/// Earliest conflict between controlled paths (padded at their goal), between
/// a controlled path and a predicted path, or between a controlled path and an
/// obstacle vertex. Ties at one timestep go to the lexicographically smallest
/// party pair. Party ids are indices into `paths` / `predictions`.
inline std::optional<Conflict> detectFirstConflict(const GridMap& map,
                                                   const std::vector<Path>& paths,
                                                   const std::vector<Path>& predictions,
                                                   const DynamicObstacleSet& obstacles,
                                                   const ConflictScope& scope = {}) {
  int end = detail::scanEnd(paths, predictions, obstacles, scope);
  std::vector<Conflict> found;
  for (int t = scope.start_time; t <= end; ++t) {
    found.clear();
    detail::conflictsAt(map, paths, predictions, obstacles, scope, t, found);
    if (!found.empty()) {
      return *std::min_element(found.begin(), found.end(), detail::conflictLess);
    }
  }
  return std::nullopt;
}

/// Focal measure of a joint solution: the number of (party pair, timestep)
/// conflicts.
inline int countConflicts(const GridMap& map, const std::vector<Path>& paths,
                          const std::vector<Path>& predictions,
                          const DynamicObstacleSet& obstacles, const ConflictScope& scope) {
  int end = detail::scanEnd(paths, predictions, obstacles, scope);
  std::vector<Conflict> found;
  for (int t = scope.start_time; t <= end; ++t) {
    detail::conflictsAt(map, paths, predictions, obstacles, scope, t, found);
  }
  return static_cast<int>(found.size());
}

enum class SolverMode { kCbsOptimal, kEcbs, kDuaEcbs };

struct SolverConfig {
  SolverMode mode = SolverMode::kEcbs;
  double w = 1.5;
  std::optional<int> conflict_horizon;
  double time_budget_s = 100.0;    // per escalation stage
  std::size_t node_budget = 0;     // high-level expansions per stage; 0 = unlimited
  int max_escalations = 10;
  int timestep_cap = 0;            // 0 selects 4 * |V|
  // Called for every generated child with the parent's and the child's
  // constraint lists.
  std::function<void(const std::vector<Constraint>&, const std::vector<Constraint>&)> on_branch;
};

struct AgentTask {
  Coord start;
  std::vector<Coord> goals;
};

/// One MAPF instance, possibly windowed. Obstacles and predictions are only
/// consulted in DUA mode.
struct MapfInstance {
  const GridMap* map = nullptr;
  DistanceCache* distances = nullptr;
  int start_time = 0;
  std::vector<AgentTask> agents;
  std::vector<AgentId> ids;  // external ids; defaults to the agent index
  DynamicObstacleSet obstacles;
  std::vector<Path> predictions;
  std::vector<Coord> static_obstacles;       // no agent may enter
  std::vector<std::vector<Coord>> reserved;  // reserved[i]: only agent i may enter

  AgentId idOf(int i) const { return ids.empty() ? i : ids.at(i); }
};

struct SolveStats {
  std::size_t expanded = 0;
  std::size_t generated = 0;
  std::size_t low_level_expanded = 0;
  double runtime_s = 0.0;
  double w_final = 1.0;
  int escalations = 0;
};

struct Solution {
  std::vector<Path> paths;  // one per agent, in instance order
  int cost = 0;
  int lower_bound = 0;
  SolveStats stats;
};

inline nlohmann::json solutionToJson(const Solution& s, bool timing = true) {
  nlohmann::json paths = nlohmann::json::object();
  for (const Path& p : s.paths) {
    nlohmann::json verts = nlohmann::json::array();
    for (const Coord& c : p.vertices) verts.push_back(toJson(c));
    paths[std::to_string(p.agent)] = verts;
  }
  return {{"paths", paths},
          {"cost", s.cost},
          {"expanded", s.stats.expanded},
          {"runtime_s", timing ? s.stats.runtime_s : 0.0},
          {"w_final", s.stats.w_final}};
}

namespace detail {

struct CTNode {
  std::vector<Constraint> constraints;  // agent field is the internal index
  std::vector<Path> paths;
  std::vector<int> lbs;
  int cost = 0;
  int lb = 0;
  int focal = 0;
  std::size_t id = 0;
};

class HighLevelSearch {
 public:
  HighLevelSearch(const MapfInstance& inst, const SolverConfig& cfg)
      : inst_(inst),
        cfg_(cfg),
        map_(*inst.map),
        dua_(cfg.mode == SolverMode::kDuaEcbs),
        w_(cfg.mode == SolverMode::kCbsOptimal ? 1.0 : cfg.w) {
    if (!inst.map || !inst.distances) throw std::invalid_argument("instance needs a map");
    if (w_ < 1.0) throw std::invalid_argument("suboptimality factor must be >= 1");
    if (!inst.ids.empty() && inst.ids.size() != inst.agents.size()) {
      throw std::invalid_argument("ids must match agents");
    }
    scope_.start_time = inst.start_time;
    scope_.horizon = cfg.conflict_horizon;
    validate();
    buildStaticMasks();
  }

  Solution run() {
    auto started = Clock::now();
    stage_started_ = started;
    Solution out;
    const int n = static_cast<int>(inst_.agents.size());
    auto root = std::make_unique<CTNode>();
    root->paths.resize(n);
    root->lbs.resize(n);
    for (int i = 0; i < n; ++i) {
      auto r = plan(*root, i, i);
      if (!r) rootFailure(i);
      root->paths[i] = std::move(r->path);
      root->lbs[i] = r->f_min;
    }
    finalize(*root);
    push(std::move(root));

    while (!open_.empty()) {
      checkBudget();
      refreshFocal();
      std::size_t idx = *focal_.begin();
      focal_.erase(idx);
      open_.erase(idx);
      ++stats_.expanded;
      ++stage_expanded_;
      CTNode& node = *nodes_[idx];
      auto conflict = detectFirstConflict(map_, node.paths, predictions(), obstacles(), scope_);
      if (!conflict) {
        out.paths = node.paths;
        for (int i = 0; i < n; ++i) out.paths[i].agent = inst_.idOf(i);
        out.cost = node.cost;
        out.lower_bound = node.lb;
        stats_.w_final = w_;
        stats_.runtime_s = seconds(Clock::now() - started);
        out.stats = stats_;
        return out;
      }
      for (int r : classifyConflict(*conflict)) {
        auto child = std::make_unique<CTNode>(node);
        child->constraints.push_back(constraintFor(*conflict, r));
        ++stats_.generated;
        if (cfg_.on_branch) cfg_.on_branch(node.constraints, child->constraints);
        auto res = plan(*child, r, n);
        if (!res) continue;
        child->paths[r] = std::move(res->path);
        child->lbs[r] = res->f_min;
        finalize(*child);
        push(std::move(child));
      }
      nodes_[idx].reset();
    }
    throw UnsolvableError("constraint tree exhausted without a conflict-free solution");
  }

 private:
  using Clock = std::chrono::steady_clock;

  static double seconds(Clock::duration d) {
    return std::chrono::duration<double>(d).count();
  }

  struct OpenCmp {
    const std::vector<std::unique_ptr<CTNode>>* nodes;
    bool operator()(std::size_t a, std::size_t b) const {
      const CTNode& x = *(*nodes)[a];
      const CTNode& y = *(*nodes)[b];
      if (x.lb != y.lb) return x.lb < y.lb;
      return a < b;
    }
  };
  struct FocalCmp {
    const std::vector<std::unique_ptr<CTNode>>* nodes;
    bool operator()(std::size_t a, std::size_t b) const {
      const CTNode& x = *(*nodes)[a];
      const CTNode& y = *(*nodes)[b];
      if (x.focal != y.focal) return x.focal < y.focal;
      if (x.cost != y.cost) return x.cost < y.cost;
      return a < b;
    }
  };

  const std::vector<Path>& predictions() const { return dua_ ? inst_.predictions : empty_paths_; }
  const DynamicObstacleSet& obstacles() const { return dua_ ? inst_.obstacles : empty_obstacles_; }

  void validate() const {
    std::vector<Coord> starts;
    for (const AgentTask& a : inst_.agents) {
      map_.requirePassable(a.start);
      if (a.goals.empty()) throw std::invalid_argument("agent without a goal");
      for (const Coord& g : a.goals) map_.requirePassable(g);
      starts.push_back(a.start);
    }
    std::sort(starts.begin(), starts.end());
    if (std::adjacent_find(starts.begin(), starts.end()) != starts.end()) {
      throw std::invalid_argument("two agents share a start vertex");
    }
  }

  void buildStaticMasks() {
    const int n = static_cast<int>(inst_.agents.size());
    std::vector<std::uint8_t> base(map_.numCells(), 0);
    for (const Coord& c : inst_.static_obstacles) base[map_.index(c)] = 1;
    bool any_reserved = false;
    for (const auto& r : inst_.reserved) any_reserved |= !r.empty();
    masks_.assign(n, base);
    if (any_reserved) {
      for (int i = 0; i < static_cast<int>(inst_.reserved.size()); ++i) {
        for (const Coord& c : inst_.reserved[i]) {
          for (int j = 0; j < n; ++j) {
            if (j != i) masks_[j][map_.index(c)] = 1;
          }
        }
      }
    }
  }

  /// Replans agent `i` under the node's constraints against the node's other
  /// paths (the first `visible` agents only).
  std::optional<LowLevelResult> plan(const CTNode& node, int i, int visible) {
    ConflictTable table(map_);
    for (int j = 0; j < visible && j < static_cast<int>(node.paths.size()); ++j) {
      if (j != i && !node.paths[j].vertices.empty()) table.addPath(node.paths[j], true);
    }
    for (const Path& p : predictions()) table.addPath(p, false);
    std::vector<Constraint> mine;
    for (const Constraint& c : node.constraints) {
      if (c.agent == i) mine.push_back(c);
    }
    LowLevelRequest req;
    req.map = &map_;
    req.distances = inst_.distances;
    req.agent = inst_.idOf(i);
    req.start = inst_.agents[i].start;
    req.goals = inst_.agents[i].goals;
    req.start_time = inst_.start_time;
    req.constraints = &mine;
    req.obstacles = &obstacles();
    req.static_blocked = &masks_[i];
    req.conflicts = &table;
    req.w = w_;
    req.horizon = cfg_.conflict_horizon;
    req.timestep_cap = cfg_.timestep_cap;
    auto r = tryLowLevelSearch(req);
    if (r) stats_.low_level_expanded += r->expanded;
    return r;
  }

  [[noreturn]] void rootFailure(int i) {
    LowLevelRequest req;
    req.map = &map_;
    req.distances = inst_.distances;
    req.agent = inst_.idOf(i);
    req.start = inst_.agents[i].start;
    req.goals = inst_.agents[i].goals;
    req.start_time = inst_.start_time;
    req.horizon = cfg_.conflict_horizon;
    req.timestep_cap = cfg_.timestep_cap;
    if (!tryLowLevelSearch(req)) {
      throw UnsolvableError("agent " + std::to_string(inst_.idOf(i)) +
                            " cannot reach its goals even without obstacles");
    }
    throw SearchExhausted(inst_.idOf(i), "blocked by obstacles or reservations");
  }

  void finalize(CTNode& node) {
    node.cost = 0;
    node.lb = 0;
    for (std::size_t i = 0; i < node.paths.size(); ++i) {
      node.cost += node.paths[i].cost();
      node.lb += node.lbs[i];
    }
    node.focal = countConflicts(map_, node.paths, predictions(), obstacles(), scope_);
  }

  void push(std::unique_ptr<CTNode> node) {
    node->id = nodes_.size();
    nodes_.push_back(std::move(node));
    std::size_t idx = nodes_.size() - 1;
    open_.insert(idx);
    if (nodes_[idx]->cost <= focalBound()) focal_.insert(idx);
  }

  double focalBound() const { return w_ * best_lb_ + 1e-9; }

  void refreshFocal() {
    int lb = nodes_[*open_.begin()]->lb;
    if (lb != best_lb_ || focal_.empty()) {
      best_lb_ = lb;
      rebuildFocal();
    }
  }

  void rebuildFocal() {
    focal_.clear();
    for (std::size_t idx : open_) {
      if (nodes_[idx]->cost <= focalBound()) focal_.insert(idx);
    }
    if (focal_.empty()) focal_.insert(*open_.begin());
  }

  void checkBudget() {
    bool over_time = seconds(Clock::now() - stage_started_) > cfg_.time_budget_s;
    bool over_nodes = cfg_.node_budget > 0 && stage_expanded_ >= cfg_.node_budget;
    if (!over_time && !over_nodes) return;
    if (cfg_.mode == SolverMode::kCbsOptimal || stats_.escalations >= cfg_.max_escalations) {
      throw BudgetExceeded("search budget exhausted at w = " + std::to_string(w_));
    }
    w_ += 1.0;
    ++stats_.escalations;
    stage_expanded_ = 0;
    stage_started_ = Clock::now();
    rebuildFocal();
  }

  const MapfInstance& inst_;
  SolverConfig cfg_;
  const GridMap& map_;
  bool dua_;
  double w_;
  ConflictScope scope_;
  std::vector<std::vector<std::uint8_t>> masks_;
  std::vector<Path> empty_paths_;
  DynamicObstacleSet empty_obstacles_;
  std::vector<std::unique_ptr<CTNode>> nodes_;
  std::set<std::size_t, OpenCmp> open_{OpenCmp{&nodes_}};
  std::set<std::size_t, FocalCmp> focal_{FocalCmp{&nodes_}};
  int best_lb_ = -1;
  SolveStats stats_;
  Clock::time_point stage_started_;
  std::size_t stage_expanded_ = 0;
};

}  // namespace detail

/// Constraint-tree search. CBS-optimal runs with w = 1 at both levels; ECBS
/// ignores obstacles and predictions; DUA-ECBS honors both and applies the
/// conflict classification to decide which agents branch.
inline Solution solve(const MapfInstance& instance, const SolverConfig& config) {
  return detail::HighLevelSearch(instance, config).run();
}

/// Independent rescan of a solution. Returns human-readable problems; empty
/// means no controlled-controlled conflict and no obstacle occupancy within
/// the scope.
inline std::vector<std::string> auditSolution(const GridMap& map,
                                              const std::vector<Path>& paths,
                                              const DynamicObstacleSet& obstacles,
                                              const ConflictScope& scope) {
  std::vector<std::string> problems;
  int end = scope.start_time;
  for (const Path& p : paths) end = std::max(end, p.endTime());
  if (!obstacles.empty()) end = std::max(end, obstacles.lastDynamicTime() + 1);
  if (scope.horizon) end = std::min(end, scope.start_time + *scope.horizon);
  for (const Path& p : paths) {
    for (std::size_t k = 0; k + 1 < p.vertices.size(); ++k) {
      if (!map.adjacentOrSame(p.vertices[k], p.vertices[k + 1])) {
        problems.push_back("agent " + std::to_string(p.agent) + " jumps at step " +
                           std::to_string(k));
      }
    }
    for (const Coord& c : p.vertices) {
      if (!map.passable(c)) problems.push_back("agent " + std::to_string(p.agent) + " on blocked cell");
    }
  }
  for (int t = scope.start_time + 1; t <= end; ++t) {
    for (std::size_t i = 0; i < paths.size(); ++i) {
      for (std::size_t j = i + 1; j < paths.size(); ++j) {
        if (paths[i].at(t) == paths[j].at(t)) {
          problems.push_back("vertex conflict between agents " + std::to_string(paths[i].agent) +
                             " and " + std::to_string(paths[j].agent) + " at t=" +
                             std::to_string(t));
        }
        if (paths[i].at(t - 1) == paths[j].at(t) && paths[i].at(t) == paths[j].at(t - 1) &&
            paths[i].at(t) != paths[i].at(t - 1)) {
          problems.push_back("edge conflict between agents " + std::to_string(paths[i].agent) +
                             " and " + std::to_string(paths[j].agent) + " at t=" +
                             std::to_string(t - 1));
        }
      }
      if (obstacles.blocked(map.index(paths[i].at(t)), t)) {
        problems.push_back("agent " + std::to_string(paths[i].agent) +
                           " occupies an obstacle vertex at t=" + std::to_string(t));
      }
    }
  }
  return problems;
}

}  // namespace cpsolver
