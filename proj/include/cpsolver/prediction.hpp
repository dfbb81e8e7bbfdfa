#pragma once

#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "cpsolver/grid_world.hpp"
#include "cpsolver/mapf_core.hpp"
#include "json.hpp"

namespace cpsolver {

/// A real-valued position in grid coordinates.
struct Point {
  double row = 0.0;
  double col = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

inline Point toPoint(const Coord& c) {
  return {static_cast<double>(c.row), static_cast<double>(c.col)};
}

inline nlohmann::json toJson(const Point& p) { return {p.row, p.col}; }

/// Sliding window of the most recent observations of every uncontrolled
/// agent. `time()` is the timestep of the newest observation.
class ObservationHistory {
 public:
  explicit ObservationHistory(int window = 4) : window_(window) {
    if (window < 1) throw std::invalid_argument("observation window must be >= 1");
  }

  int window() const { return window_; }
  int time() const { return time_; }
  bool empty() const { return agents_.empty(); }
  std::size_t numAgents() const { return agents_.size(); }

  const std::map<AgentId, std::vector<Coord>>& agents() const { return agents_; }

  const std::vector<Coord>& of(AgentId id) const {
    auto it = agents_.find(id);
    if (it == agents_.end()) throw std::out_of_range("no history for agent " + std::to_string(id));
    return it->second;
  }

  Coord last(AgentId id) const { return of(id).back(); }

  std::map<AgentId, Coord> current() const {
    std::map<AgentId, Coord> out;
    for (const auto& [id, seq] : agents_) out[id] = seq.back();
    return out;
  }

  /// Appends one observation per agent at timestep t. Agents not seen before
  /// start a fresh sequence.
  void observe(int t, const std::map<AgentId, Coord>& positions) {
    for (const auto& [id, c] : positions) {
      auto& seq = agents_[id];
      seq.push_back(c);
      if (static_cast<int>(seq.size()) > window_) seq.erase(seq.begin());
    }
    time_ = t;
  }

  /// Replaces an agent's sequence; the window is applied from the back.
  void set(AgentId id, std::vector<Coord> seq, int t) {
    if (static_cast<int>(seq.size()) > window_) {
      seq.erase(seq.begin(), seq.end() - window_);
    }
    agents_[id] = std::move(seq);
    time_ = t;
  }

  void validate(const GridMap& map) const {
    for (const auto& [id, seq] : agents_) {
      for (std::size_t k = 0; k < seq.size(); ++k) {
        map.requirePassable(seq[k]);
        if (k > 0 && !map.adjacentOrSame(seq[k - 1], seq[k])) {
          throw ContractViolation("history of agent " + std::to_string(id) + " jumps");
        }
      }
    }
  }

 private:
  int window_;
  int time_ = 0;
  std::map<AgentId, std::vector<Coord>> agents_;
};

/// Predicted positions for t+1 .. t+H, keyed by agent id.
struct PredictionBundle {
  int horizon = 0;
  int issued_at = 0;
  std::map<AgentId, std::vector<Point>> points;

  void clampTo(const GridMap& map) {
    for (auto& [id, seq] : points) {
      for (Point& p : seq) {
        p.row = std::clamp(p.row, 0.0, static_cast<double>(map.height() - 1));
        p.col = std::clamp(p.col, 0.0, static_cast<double>(map.width() - 1));
      }
    }
  }

  friend bool operator==(const PredictionBundle&, const PredictionBundle&) = default;
};

/// Repeats each agent's last observed position for all H steps.
inline PredictionBundle predictConstant(const ObservationHistory& hist, int H) {
  if (H < 1) throw std::invalid_argument("prediction horizon must be >= 1");
  if (hist.empty()) throw std::invalid_argument("empty observation history");
  PredictionBundle out{H, hist.time(), {}};
  for (const auto& [id, seq] : hist.agents()) {
    if (seq.empty()) throw std::invalid_argument("agent " + std::to_string(id) + " has no observations");
    out.points[id] = std::vector<Point>(H, toPoint(seq.back()));
  }
  return out;
}

/// Goal-imputing predictor. Each agent's position is advanced one step along
/// its last move; the nearest (by graph distance) task spot not yet taken by a
/// lower id becomes its goal, and the prediction follows the shortest path to
/// it, waiting there once reached.
inline PredictionBundle predictAstarGoal(const ObservationHistory& hist, const GridMap& map,
                                         DistanceCache& cache, int H) {
  if (H < 1) throw std::invalid_argument("prediction horizon must be >= 1");
  if (hist.empty()) throw std::invalid_argument("empty observation history");
  for (const auto& [id, seq] : hist.agents()) {
    if (seq.size() < 2) {
      throw std::invalid_argument("agent " + std::to_string(id) +
                                  " needs at least two observations to estimate a heading");
    }
  }
  if (map.taskSpots().empty()) {
    std::cerr << "warning: map '" << map.name()
              << "' has no task spots; falling back to constant prediction\n";
    return predictConstant(hist, H);
  }
  const auto& spots = map.taskSpots();
  std::vector<bool> taken(spots.size(), false);
  PredictionBundle out{H, hist.time(), {}};
  for (const auto& [id, seq] : hist.agents()) {
    Coord cur = seq.back();
    Coord prev = seq[seq.size() - 2];
    Coord ahead{2 * cur.row - prev.row, 2 * cur.col - prev.col};
    if (!map.passable(ahead)) ahead = cur;
    auto from_ahead = cache.from(ahead);
    std::optional<std::size_t> best;
    for (std::size_t s = 0; s < spots.size(); ++s) {
      if (taken[s]) continue;
      int d = (*from_ahead)[map.index(spots[s])];
      if (d == kUnreachable) continue;
      if (!best || d < (*from_ahead)[map.index(spots[*best])]) best = s;
    }
    std::vector<Point> pts;
    if (!best) {
      pts.assign(H, toPoint(cur));
    } else {
      taken[*best] = true;
      auto path = descend(map, *cache.from(spots[*best]), cur);
      if (path.empty()) path.push_back(cur);
      for (int h = 1; h <= H; ++h) {
        pts.push_back(toPoint(path[std::min<std::size_t>(h, path.size() - 1)]));
      }
    }
    out.points[id] = std::move(pts);
  }
  return out;
}

class PredictorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The predictor process died, could not be started, or closed its pipe.
class PredictorTransportError : public PredictorError {
 public:
  using PredictorError::PredictorError;
};

/// No complete response arrived before the deadline.
class PredictorDeadlineError : public PredictorError {
 public:
  using PredictorError::PredictorError;
};

/// A response arrived but does not match the protocol.
class PredictorSchemaError : public PredictorError {
 public:
  using PredictorError::PredictorError;
};

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual PredictionBundle predict(const ObservationHistory& hist, int H) = 0;
  virtual std::string name() const = 0;
};

class ConstantPredictor : public Predictor {
 public:
  PredictionBundle predict(const ObservationHistory& hist, int H) override {
    return predictConstant(hist, H);
  }
  std::string name() const override { return "constant"; }
};

class AstarGoalPredictor : public Predictor {
 public:
  AstarGoalPredictor(const GridMap& map, DistanceCache& cache) : map_(map), cache_(cache) {}

  PredictionBundle predict(const ObservationHistory& hist, int H) override {
    return predictAstarGoal(hist, map_, cache_, H);
  }
  std::string name() const override { return "astar-goal"; }

 private:
  const GridMap& map_;
  DistanceCache& cache_;
};

/// Child process speaking line-delimited JSON on its stdin/stdout. One
/// request is in flight at a time; concurrent callers are serialized.
class ExternalPredictor : public Predictor {
 public:
  using Millis = std::chrono::milliseconds;

  ExternalPredictor(std::vector<std::string> argv, const GridMap& map,
                    Millis deadline = Millis(1000), Millis startup = Millis(10000))
      : argv_(std::move(argv)), map_(map), deadline_(deadline) {
    if (argv_.empty()) throw std::invalid_argument("empty predictor command");
    spawn();
    nlohmann::json hello;
    try {
      hello = readMessage(startup, "handshake");
    } catch (...) {
      terminate();
      throw;
    }
    if (!hello.is_object() || hello.value("type", "") != "hello" ||
        !hello.contains("model") || !hello["model"].is_string() ||
        !hello.contains("history_len") || !hello["history_len"].is_number_integer()) {
      terminate();
      throw PredictorSchemaError("bad handshake: " + hello.dump());
    }
    model_ = hello["model"].get<std::string>();
    history_len_ = hello["history_len"].get<int>();
  }

  ExternalPredictor(const ExternalPredictor&) = delete;
  ExternalPredictor& operator=(const ExternalPredictor&) = delete;

  ~ExternalPredictor() override { shutdown(); }

  const std::string& model() const { return model_; }
  int historyLength() const { return history_len_; }
  std::string name() const override { return "external:" + model_; }
  void setDeadline(Millis d) { deadline_ = d; }

  PredictionBundle predict(const ObservationHistory& hist, int H) override {
    if (H < 1) throw std::invalid_argument("prediction horizon must be >= 1");
    std::lock_guard<std::mutex> lock(mutex_);
    if (pid_ < 0) throw PredictorTransportError("predictor is not running");
    nlohmann::json history = nlohmann::json::object();
    for (const auto& [id, seq] : hist.agents()) {
      nlohmann::json pts = nlohmann::json::array();
      for (const Coord& c : seq) pts.push_back(toJson(c));
      history[std::to_string(id)] = pts;
    }
    nlohmann::json req = {{"type", "predict"}, {"t", hist.time()}, {"H", H}, {"history", history}};
    writeLine(req.dump());
    // Responses to requests that previously missed their deadline are still
    // in the pipe, in order; skip them.
    nlohmann::json resp;
    auto until = Clock::now() + deadline_;
    do {
      resp = readMessage(until, "prediction");
    } while (stale_-- > 0);
    stale_ = 0;
    return parseResponse(resp, hist, H);
  }

  /// Asks the child to exit and reaps it; kills it if it lingers.
  void shutdown() noexcept {
    if (pid_ < 0) return;
    try {
      writeLine(R"({"type":"shutdown"})");
    } catch (...) {
    }
    auto until = Clock::now() + Millis(1000);
    while (Clock::now() < until) {
      if (waitpid(pid_, &status_, WNOHANG) == pid_) {
        pid_ = -1;
        break;
      }
      std::this_thread::sleep_for(Millis(5));
    }
    terminate();
  }

  /// Exit status of the child after shutdown, as returned by waitpid.
  int exitStatus() const { return status_; }

 private:
  using Clock = std::chrono::steady_clock;

  void spawn() {
    int fds[2];
    if (socketpair(AF_UNIX, SOCK_STREAM, 0, fds) != 0) {
      throw PredictorTransportError(std::string("socketpair: ") + std::strerror(errno));
    }
    std::vector<char*> args;
    for (auto& a : argv_) args.push_back(a.data());
    args.push_back(nullptr);
    pid_t pid = fork();
    if (pid < 0) {
      close(fds[0]);
      close(fds[1]);
      throw PredictorTransportError(std::string("fork: ") + std::strerror(errno));
    }
    if (pid == 0) {
      dup2(fds[1], STDIN_FILENO);
      dup2(fds[1], STDOUT_FILENO);
      close(fds[0]);
      close(fds[1]);
      execvp(args[0], args.data());
      _exit(127);
    }
    close(fds[1]);
    fd_ = fds[0];
    pid_ = pid;
  }

  void terminate() noexcept {
    if (pid_ > 0) {
      kill(pid_, SIGKILL);
      waitpid(pid_, &status_, 0);
      pid_ = -1;
    }
    if (fd_ >= 0) {
      close(fd_);
      fd_ = -1;
    }
  }

  void writeLine(const std::string& line) {
    std::string data = line + "\n";
    std::size_t off = 0;
    while (off < data.size()) {
      ssize_t n = send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw PredictorTransportError(std::string("write to predictor: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  nlohmann::json readMessage(Millis timeout, const char* what) {
    return readMessage(Clock::now() + timeout, what);
  }

  nlohmann::json readMessage(Clock::time_point until, const char* what) {
    std::string line;
    for (;;) {
      auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        break;
      }
      auto left = std::chrono::duration_cast<Millis>(until - Clock::now()).count();
      if (left <= 0) {
        ++stale_;
        throw PredictorDeadlineError(std::string("no ") + what + " within " +
                                     std::to_string(deadline_.count()) + " ms");
      }
      pollfd p{fd_, POLLIN, 0};
      int r = poll(&p, 1, static_cast<int>(left));
      if (r < 0) {
        if (errno == EINTR) continue;
        throw PredictorTransportError(std::string("poll: ") + std::strerror(errno));
      }
      if (r == 0) continue;
      char chunk[4096];
      ssize_t n = read(fd_, chunk, sizeof(chunk));
      if (n < 0) {
        if (errno == EINTR) continue;
        throw PredictorTransportError(std::string("read from predictor: ") + std::strerror(errno));
      }
      if (n == 0) {
        terminate();
        throw PredictorTransportError("predictor closed its output");
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
    try {
      return nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw PredictorSchemaError(std::string("unparsable ") + what + ": " + e.what());
    }
  }

  PredictionBundle parseResponse(const nlohmann::json& resp, const ObservationHistory& hist,
                                 int H) const {
    if (!resp.is_object()) throw PredictorSchemaError("response is not an object");
    std::string type = resp.value("type", "");
    if (type == "error") throw PredictorSchemaError("predictor reported: " + resp.dump());
    if (type != "prediction") throw PredictorSchemaError("unexpected message type '" + type + "'");
    if (!resp.contains("predictions") || !resp["predictions"].is_object()) {
      throw PredictorSchemaError("missing predictions object");
    }
    const auto& preds = resp["predictions"];
    if (preds.size() != hist.numAgents()) {
      throw PredictorSchemaError("expected " + std::to_string(hist.numAgents()) +
                                 " agents, got " + std::to_string(preds.size()));
    }
    PredictionBundle out{H, hist.time(), {}};
    for (const auto& [id, seq] : hist.agents()) {
      std::string key = std::to_string(id);
      if (!preds.contains(key)) throw PredictorSchemaError("missing agent " + key);
      const auto& arr = preds[key];
      if (!arr.is_array() || static_cast<int>(arr.size()) != H) {
        throw PredictorSchemaError("agent " + key + ": expected " + std::to_string(H) + " points");
      }
      std::vector<Point> pts;
      for (const auto& p : arr) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
          throw PredictorSchemaError("agent " + key + ": malformed point " + p.dump());
        }
        Point q{p[0].get<double>(), p[1].get<double>()};
        if (!std::isfinite(q.row) || !std::isfinite(q.col)) {
          throw PredictorSchemaError("agent " + key + ": non-finite point");
        }
        pts.push_back(q);
      }
      out.points[id] = std::move(pts);
    }
    out.clampTo(map_);
    return out;
  }

  std::vector<std::string> argv_;
  const GridMap& map_;
  Millis deadline_;
  std::mutex mutex_;
  pid_t pid_ = -1;
  int fd_ = -1;
  int status_ = 0;
  int stale_ = 0;
  std::string buffer_;
  std::string model_;
  int history_len_ = 0;
};

}  // namespace cpsolver
