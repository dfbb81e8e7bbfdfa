#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <iostream>
#include <limits>
#include <list>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace cpsolver {

/// A grid cell. Rows grow downward, columns grow to the right.
struct Coord {
  int row = 0;
  int col = 0;

  friend auto operator<=>(const Coord&, const Coord&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Coord& c) {
  return os << "(" << c.row << "," << c.col << ")";
}

struct CoordHash {
  std::size_t operator()(const Coord& c) const noexcept {
    return std::hash<std::int64_t>()((static_cast<std::int64_t>(c.row) << 32) ^
                                     static_cast<std::uint32_t>(c.col));
  }
};

inline nlohmann::json toJson(const Coord& c) { return {c.row, c.col}; }

inline Coord coordFromJson(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() ||
      !j[1].is_number_integer()) {
    throw std::invalid_argument("expected [row, col], got " + j.dump());
  }
  return {j[0].get<int>(), j[1].get<int>()};
}

/// Thrown by the map loaders. Carries the 1-based line and column of the
/// offending input.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, int line, int column)
      : std::runtime_error("line " + std::to_string(line) + ", column " +
                           std::to_string(column) + ": " + what),
        line_(line),
        column_(column) {}

  int line() const { return line_; }
  int column() const { return column_; }

 private:
  int line_;
  int column_;
};

/// Raised when an operation is called on a blocked or out-of-bounds cell.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline constexpr int kUnreachable = std::numeric_limits<int>::max();

/// Undirected 4-connected grid graph. Every passable cell also has a wait
/// self-loop. Immutable once constructed.
class GridMap {
 public:
  static constexpr int kMaxDegree = 5;  // self + 4 orthogonal

  GridMap() = default;

  GridMap(int width, int height, std::vector<std::uint8_t> passable,
          std::vector<Coord> task_spots, std::string name = "")
      : width_(width),
        height_(height),
        name_(std::move(name)),
        passable_(std::move(passable)) {
    if (width <= 0 || height <= 0) {
      throw std::invalid_argument("map dimensions must be positive");
    }
    if (passable_.size() != static_cast<std::size_t>(width) * height) {
      throw std::invalid_argument("passability mask has wrong size");
    }
    task_mask_.assign(passable_.size(), 0);
    for (const Coord& c : task_spots) {
      if (!this->passable(c)) {
        std::ostringstream msg;
        msg << "task spot " << c << " is not a passable cell";
        throw std::invalid_argument(msg.str());
      }
      task_mask_[index(c)] = 1;
    }
    for (int i = 0; i < numCells(); ++i) {
      if (task_mask_[i]) task_spots_.push_back(coordOf(i));
      if (passable_[i]) passable_cells_.push_back(i);
    }
    if (passable_cells_.empty()) {
      throw std::invalid_argument("map has no passable cell");
    }
    buildAdjacency();
  }

  int width() const { return width_; }
  int height() const { return height_; }
  const std::string& name() const { return name_; }
  int numCells() const { return width_ * height_; }
  int numPassable() const { return static_cast<int>(passable_cells_.size()); }

  bool inBounds(Coord c) const {
    return c.row >= 0 && c.col >= 0 && c.row < height_ && c.col < width_;
  }
  bool passable(Coord c) const { return inBounds(c) && passable_[index(c)]; }
  bool passableIndex(int i) const { return passable_[i] != 0; }

  int index(Coord c) const { return c.row * width_ + c.col; }
  Coord coordOf(int i) const { return {i / width_, i % width_}; }

  /// Row-major task spot list.
  const std::vector<Coord>& taskSpots() const { return task_spots_; }
  bool isTaskSpot(Coord c) const { return inBounds(c) && task_mask_[index(c)]; }

  /// Row-major indices of passable cells.
  const std::vector<int>& passableCells() const { return passable_cells_; }

  /// The queried vertex followed by its passable orthogonal neighbors in the
  /// order up, down, left, right.
  std::vector<Coord> neighbors(Coord v) const {
    requirePassable(v);
    std::vector<Coord> out;
    const auto& adj = adjacency_[index(v)];
    for (int k = 0; k < adj.count; ++k) out.push_back(coordOf(adj.cells[k]));
    return out;
  }

  /// Index-space neighbors; same order as neighbors().
  template <typename Fn>
  void forEachNeighbor(int cell, Fn&& fn) const {
    const auto& adj = adjacency_[cell];
    for (int k = 0; k < adj.count; ++k) fn(adj.cells[k]);
  }

  bool adjacentOrSame(Coord a, Coord b) const {
    return std::abs(a.row - b.row) + std::abs(a.col - b.col) <= 1;
  }

  void requirePassable(Coord v) const {
    if (!passable(v)) {
      std::ostringstream msg;
      msg << "cell " << v << (inBounds(v) ? " is blocked" : " is out of bounds");
      throw ContractViolation(msg.str());
    }
  }

  bool isConnected() const {
    std::vector<std::uint8_t> seen(passable_.size(), 0);
    std::deque<int> queue{passable_cells_.front()};
    seen[passable_cells_.front()] = 1;
    int count = 0;
    while (!queue.empty()) {
      int cur = queue.front();
      queue.pop_front();
      ++count;
      forEachNeighbor(cur, [&](int n) {
        if (!seen[n]) {
          seen[n] = 1;
          queue.push_back(n);
        }
      });
    }
    return count == numPassable();
  }

  friend bool operator==(const GridMap& a, const GridMap& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ &&
           a.name_ == b.name_ && a.passable_ == b.passable_ &&
           a.task_mask_ == b.task_mask_;
  }

 private:
  struct Adjacency {
    std::array<int, kMaxDegree> cells{};
    int count = 0;
  };

  void buildAdjacency() {
    adjacency_.assign(passable_.size(), Adjacency{});
    static constexpr std::array<std::array<int, 2>, 4> kMoves = {
        {{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
    for (int i : passable_cells_) {
      Coord c = coordOf(i);
      Adjacency& adj = adjacency_[i];
      adj.cells[adj.count++] = i;
      for (const auto& mv : kMoves) {
        Coord n{c.row + mv[0], c.col + mv[1]};
        if (passable(n)) adj.cells[adj.count++] = index(n);
      }
    }
  }

  int width_ = 0;
  int height_ = 0;
  std::string name_;
  std::vector<std::uint8_t> passable_;
  std::vector<std::uint8_t> task_mask_;
  std::vector<Coord> task_spots_;
  std::vector<int> passable_cells_;
  std::vector<Adjacency> adjacency_;
};

namespace detail {

inline std::pair<int, int> lineColumnOf(const std::string& text,
                                        std::size_t offset) {
  int line = 1;
  int col = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

inline std::string trimRight(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t'))
    s.pop_back();
  return s;
}

inline void warnIfDisconnected(const GridMap& map) {
  if (!map.isConnected()) {
    std::cerr << "warning: map '" << map.name()
              << "' has a disconnected passable region\n";
  }
}

inline GridMap parseMovingAi(const std::string& text, const std::string& name) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  int height = -1;
  int width = -1;

  auto next_line = [&]() -> bool {
    while (std::getline(in, line)) {
      ++line_no;
      line = trimRight(line);
      if (!line.empty()) return true;
    }
    return false;
  };

  auto header_value = [&](const std::string& key) {
    if (!next_line()) throw ParseError("missing '" + key + "' header", line_no + 1, 1);
    std::istringstream fields(line);
    std::string got;
    fields >> got;
    if (got != key) {
      throw ParseError("expected '" + key + "' header, got '" + got + "'", line_no, 1);
    }
    std::string value;
    fields >> value;
    return value;
  };

  std::string type = header_value("type");
  if (type.empty()) throw ParseError("empty map type", line_no, 6);
  for (const char* key : {"height", "width"}) {
    std::string value = header_value(key);
    int parsed = 0;
    try {
      std::size_t used = 0;
      parsed = std::stoi(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw ParseError(std::string("invalid ") + key + " '" + value + "'", line_no,
                       static_cast<int>(std::string(key).size()) + 2);
    }
    if (parsed <= 0) {
      throw ParseError(std::string(key) + " must be positive", line_no, 1);
    }
    (std::string(key) == "height" ? height : width) = parsed;
  }
  if (!next_line() || line != "map") {
    throw ParseError("expected 'map' line", line_no, 1);
  }

  std::vector<std::uint8_t> passable(static_cast<std::size_t>(width) * height, 0);
  std::vector<Coord> spots;
  for (int r = 0; r < height; ++r) {
    if (!std::getline(in, line)) {
      throw ParseError("expected " + std::to_string(height) + " grid rows, got " +
                           std::to_string(r),
                       line_no + 1, 1);
    }
    ++line_no;
    line = trimRight(line);
    if (static_cast<int>(line.size()) != width) {
      throw ParseError("row has " + std::to_string(line.size()) +
                           " cells, expected " + std::to_string(width),
                       line_no, static_cast<int>(std::min<std::size_t>(line.size(), width)) + 1);
    }
    for (int c = 0; c < width; ++c) {
      switch (line[c]) {
        case '.':
        case 'G':
          passable[r * width + c] = 1;
          spots.push_back({r, c});
          break;
        case '@':
        case 'O':
        case 'T':
          break;
        default:
          throw ParseError(std::string("unknown cell character '") + line[c] + "'",
                           line_no, c + 1);
      }
    }
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (!trimRight(line).empty()) {
      throw ParseError("unexpected content after grid", line_no, 1);
    }
  }
  if (spots.empty()) throw ParseError("map has zero passable cells", line_no, 1);
  return GridMap(width, height, std::move(passable), std::move(spots), name);
}

inline GridMap parseJsonMap(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    auto [line, col] = lineColumnOf(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ParseError(e.what(), line, col);
  }
  auto fail = [](const std::string& what) -> ParseError { return ParseError(what, 1, 1); };
  if (!j.is_object()) throw fail("JSON map must be an object");
  for (const char* key : {"width", "height"}) {
    if (!j.contains(key) || !j[key].is_number_integer() || j[key].get<int>() <= 0) {
      throw fail(std::string("field '") + key + "' must be a positive integer");
    }
  }
  int width = j["width"];
  int height = j["height"];
  std::vector<std::uint8_t> passable(static_cast<std::size_t>(width) * height, 1);
  auto read_cells = [&](const char* key) {
    std::vector<Coord> cells;
    if (!j.contains(key)) return cells;
    if (!j[key].is_array()) throw fail(std::string("field '") + key + "' must be an array");
    for (const auto& item : j[key]) {
      Coord c;
      try {
        c = coordFromJson(item);
      } catch (const std::invalid_argument& e) {
        throw fail(std::string(key) + ": " + e.what());
      }
      if (c.row < 0 || c.col < 0 || c.row >= height || c.col >= width) {
        std::ostringstream msg;
        msg << key << ": cell " << c << " out of bounds";
        throw fail(msg.str());
      }
      cells.push_back(c);
    }
    return cells;
  };
  for (const Coord& c : read_cells("blocked")) passable[c.row * width + c.col] = 0;
  std::vector<Coord> spots = read_cells("task_spots");
  if (std::none_of(passable.begin(), passable.end(), [](auto p) { return p != 0; })) {
    throw fail("map has zero passable cells");
  }
  for (const Coord& c : spots) {
    if (!passable[c.row * width + c.col]) {
      std::ostringstream msg;
      msg << "task spot " << c << " is blocked";
      throw fail(msg.str());
    }
  }
  std::string name = j.value("name", std::string());
  return GridMap(width, height, std::move(passable), std::move(spots), std::move(name));
}

}  // namespace detail

/// Loads either a MovingAI `.map` text or the JSON map format. MovingAI maps
/// are always read as 4-connected; every passable cell becomes a task spot.
inline GridMap parseMap(const std::string& text, const std::string& name = "") {
  auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) throw ParseError("empty map text", 1, 1);
  GridMap map = text[first] == '{' ? detail::parseJsonMap(text)
                                   : detail::parseMovingAi(text, name);
  detail::warnIfDisconnected(map);
  return map;
}

inline nlohmann::json mapToJson(const GridMap& map) {
  nlohmann::json blocked = nlohmann::json::array();
  for (int i = 0; i < map.numCells(); ++i) {
    if (!map.passableIndex(i)) blocked.push_back(toJson(map.coordOf(i)));
  }
  nlohmann::json spots = nlohmann::json::array();
  for (const Coord& c : map.taskSpots()) spots.push_back(toJson(c));
  return {{"name", map.name()},
          {"width", map.width()},
          {"height", map.height()},
          {"blocked", blocked},
          {"task_spots", spots}};
}

inline std::string serializeMap(const GridMap& map) { return mapToJson(map).dump(); }

/// MovingAI text. Task spots are not representable in this format.
inline std::string toMovingAi(const GridMap& map) {
  std::ostringstream out;
  out << "type octile\nheight " << map.height() << "\nwidth " << map.width() << "\nmap\n";
  for (int r = 0; r < map.height(); ++r) {
    for (int c = 0; c < map.width(); ++c) out << (map.passable({r, c}) ? '.' : '@');
    out << '\n';
  }
  return out.str();
}

/// Hop distances from one source; kUnreachable for blocked or disconnected
/// cells. Indexed by GridMap::index.
using DistanceField = std::vector<int>;

inline DistanceField shortestPathDist(const GridMap& map, Coord src) {
  map.requirePassable(src);
  DistanceField dist(map.numCells(), kUnreachable);
  std::vector<int> queue;
  queue.reserve(map.numPassable());
  int s = map.index(src);
  dist[s] = 0;
  queue.push_back(s);
  for (std::size_t head = 0; head < queue.size(); ++head) {
    int cur = queue[head];
    map.forEachNeighbor(cur, [&](int n) {
      if (dist[n] == kUnreachable) {
        dist[n] = dist[cur] + 1;
        queue.push_back(n);
      }
    });
  }
  return dist;
}

/// Memoized BFS distance fields, bounded by an LRU capacity. Thread-safe; the
/// returned fields stay valid after eviction.
class DistanceCache {
 public:
  explicit DistanceCache(const GridMap& map, std::size_t capacity = 4096)
      : map_(map), capacity_(std::max<std::size_t>(capacity, 1)) {}

  DistanceCache(const DistanceCache&) = delete;
  DistanceCache& operator=(const DistanceCache&) = delete;

  const GridMap& map() const { return map_; }

  std::shared_ptr<const DistanceField> from(Coord src) {
    map_.requirePassable(src);
    int key = map_.index(src);
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = entries_.find(key);
      if (it != entries_.end()) {
        lru_.splice(lru_.begin(), lru_, it->second.position);
        return it->second.field;
      }
    }
    auto field = std::make_shared<const DistanceField>(shortestPathDist(map_, src));
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = entries_.find(key);
    if (it != entries_.end()) return it->second.field;
    lru_.push_front(key);
    entries_.emplace(key, Entry{field, lru_.begin()});
    while (entries_.size() > capacity_) {
      entries_.erase(lru_.back());
      lru_.pop_back();
    }
    return field;
  }

  int distance(Coord a, Coord b) { return (*from(a))[map_.index(b)]; }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return entries_.size();
  }

 private:
  struct Entry {
    std::shared_ptr<const DistanceField> field;
    std::list<int>::iterator position;
  };

  const GridMap& map_;
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::list<int> lru_;
  std::unordered_map<int, Entry> entries_;
};

/// Follows a distance field downhill from `from` to the field's source. Ties
/// are broken by neighbor order. Returns an empty vector if unreachable.
inline std::vector<Coord> descend(const GridMap& map, const DistanceField& to_goal,
                                  Coord from) {
  int cur = map.index(from);
  if (to_goal[cur] == kUnreachable) return {};
  std::vector<Coord> path{from};
  while (to_goal[cur] > 0) {
    int next = cur;
    map.forEachNeighbor(cur, [&](int n) {
      if (next == cur && to_goal[n] == to_goal[cur] - 1) next = n;
    });
    cur = next;
    path.push_back(map.coordOf(cur));
  }
  return path;
}

enum class WarehouseSize { kSmall, kMedium, kLarge };

/// Kiva-style layout: rows of shelf segments one cell deep, separated by
/// three-cell aisles in both directions, with a two-cell margin. Task spots are
/// the cells directly above or below a shelf.
inline GridMap makeWarehouse(WarehouseSize size) {
  int shelf_rows = 6;
  int shelf_cols = 4;
  int shelf_len = 8;
  std::string name = "warehouse-small";
  if (size == WarehouseSize::kMedium) {
    shelf_rows = 7;
    shelf_cols = 5;
    shelf_len = 10;
    name = "warehouse-medium";
  } else if (size == WarehouseSize::kLarge) {
    shelf_rows = 10;
    shelf_cols = 7;
    shelf_len = 10;
    name = "warehouse-large";
  }
  constexpr int kMargin = 2;
  constexpr int kAisle = 3;
  int height = 2 * kMargin + shelf_rows + (shelf_rows - 1) * kAisle;
  int width = 2 * kMargin + shelf_cols * shelf_len + (shelf_cols - 1) * kAisle;
  std::vector<std::uint8_t> passable(static_cast<std::size_t>(width) * height, 1);
  for (int sr = 0; sr < shelf_rows; ++sr) {
    int r = kMargin + sr * (kAisle + 1);
    for (int sc = 0; sc < shelf_cols; ++sc) {
      int c0 = kMargin + sc * (shelf_len + kAisle);
      for (int c = c0; c < c0 + shelf_len; ++c) passable[r * width + c] = 0;
    }
  }
  std::vector<Coord> spots;
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      if (!passable[r * width + c]) continue;
      bool above = r + 1 < height && !passable[(r + 1) * width + c];
      bool below = r > 0 && !passable[(r - 1) * width + c];
      if (above || below) spots.push_back({r, c});
    }
  }
  return GridMap(width, height, std::move(passable), std::move(spots), name);
}

inline WarehouseSize warehouseSizeFromName(const std::string& name) {
  if (name == "warehouse-small" || name == "small") return WarehouseSize::kSmall;
  if (name == "warehouse-medium" || name == "medium") return WarehouseSize::kMedium;
  if (name == "warehouse-large" || name == "large") return WarehouseSize::kLarge;
  throw std::invalid_argument("unknown built-in map '" + name + "'");
}

/// Random obstacle map with every passable cell a task spot. Obstacles are
/// only kept if the passable region stays connected.
inline GridMap makeRandomMap(int height, int width, double obstacle_density,
                             std::mt19937_64& rng, const std::string& name = "random") {
  std::vector<std::uint8_t> passable(static_cast<std::size_t>(width) * height, 1);
  std::vector<int> order(passable.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);
  int target = static_cast<int>(obstacle_density * static_cast<double>(passable.size()));
  int placed = 0;
  auto all_spots = [&] {
    std::vector<Coord> spots;
    for (int i = 0; i < static_cast<int>(passable.size()); ++i)
      if (passable[i]) spots.push_back({i / width, i % width});
    return spots;
  };
  for (int cell : order) {
    if (placed >= target) break;
    passable[cell] = 0;
    int free_cells = static_cast<int>(std::count(passable.begin(), passable.end(), 1));
    if (free_cells == 0 ||
        !GridMap(width, height, passable, {}, name).isConnected()) {
      passable[cell] = 1;
      continue;
    }
    ++placed;
  }
  return GridMap(width, height, passable, all_spots(), name);
}

}  // namespace cpsolver
