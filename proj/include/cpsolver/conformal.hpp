#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cpsolver/prediction.hpp"
#include "json.hpp"

namespace cpsolver {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// Euclidean prediction error.
inline double nonconformity(const Point& predicted, const Point& actual) {
  return std::hypot(predicted.row - actual.row, predicted.col - actual.col);
}

/// Per-step scores of one calibration instance; scores[h - 1] belongs to step h.
struct NonconformityRecord {
  int instance = 0;
  std::vector<double> scores;
};

/// Predictions and ground truth of every uncontrolled agent over H steps.
struct CalibrationSample {
  int instance = 0;
  std::map<AgentId, std::vector<Point>> predicted;
  std::map<AgentId, std::vector<Point>> actual;
};

/// Max-over-agents error at every step of every sample.
inline std::vector<NonconformityRecord> scoreCalibrationSet(
    const std::vector<CalibrationSample>& samples, int H) {
  if (H < 1) throw std::invalid_argument("horizon must be >= 1");
  std::vector<NonconformityRecord> out;
  out.reserve(samples.size());
  for (const CalibrationSample& s : samples) {
    auto fail = [&](const std::string& what) {
      return std::invalid_argument("calibration instance " + std::to_string(s.instance) + ": " +
                                   what);
    };
    if (s.predicted.empty()) throw fail("no agents");
    if (s.predicted.size() != s.actual.size()) throw fail("agent sets differ");
    NonconformityRecord rec{s.instance, std::vector<double>(H, 0.0)};
    for (const auto& [id, pred] : s.predicted) {
      auto it = s.actual.find(id);
      if (it == s.actual.end()) throw fail("missing ground truth for agent " + std::to_string(id));
      if (static_cast<int>(pred.size()) < H || static_cast<int>(it->second.size()) < H) {
        throw fail("agent " + std::to_string(id) + " has fewer than " + std::to_string(H) +
                   " steps");
      }
      for (int h = 0; h < H; ++h) {
        rec.scores[h] = std::max(rec.scores[h], nonconformity(pred[h], it->second[h]));
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// Rank of the calibrated order statistic, ceil((n + 1)(1 - delta)), never
/// below 1. The small slack absorbs the rounding of 1 - delta.
inline int conformalRank(std::size_t n, double delta) {
  double raw = (static_cast<double>(n) + 1.0) * (1.0 - delta);
  return std::max(1, static_cast<int>(std::ceil(raw - 1e-9)));
}

using AlphaRoutine =
    std::function<std::vector<double>(const std::vector<NonconformityRecord>&, double)>;

inline constexpr double kQuantileFloor = 1e-6;

/// Default normalization: alpha_h = 1 / q_h with q_h the conformal-rank order
/// statistic of the step-h scores (the largest score when the rank exceeds
/// the sample size).
inline std::vector<double> quantileAlphas(const std::vector<NonconformityRecord>& cal1,
                                          double delta) {
  if (cal1.empty()) throw std::invalid_argument("alpha computation needs a nonempty cal1");
  const std::size_t H = cal1.front().scores.size();
  const std::size_t rank =
      std::min<std::size_t>(conformalRank(cal1.size(), delta), cal1.size());
  std::vector<double> alphas(H);
  std::vector<double> column(cal1.size());
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < cal1.size(); ++i) {
      if (cal1[i].scores.size() != H) throw std::invalid_argument("ragged calibration records");
      column[i] = cal1[i].scores[h];
    }
    std::nth_element(column.begin(), column.begin() + (rank - 1), column.end());
    alphas[h] = 1.0 / std::max(column[rank - 1], kQuantileFloor);
  }
  return alphas;
}

/// Calibrated radii per horizon step.
struct CPIntervals {
  double delta = 0.05;
  int H = 0;
  std::vector<double> alphas;
  std::vector<double> C;  // may hold +inf
  int cal2_size = 0;
  int p = 0;
  std::string method = "quantile-fallback";

  double radius(int h) const { return C.at(h - 1); }
  bool finite() const {
    return std::all_of(C.begin(), C.end(), [](double c) { return std::isfinite(c); });
  }
};

inline CPIntervals calibrate(const std::vector<NonconformityRecord>& cal2,
                             const std::vector<double>& alphas, double delta,
                             std::string method = "quantile-fallback") {
  if (cal2.empty()) throw std::invalid_argument("calibration needs a nonempty cal2");
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0, 1)");
  for (double a : alphas) {
    if (!(a > 0.0) || !std::isfinite(a)) throw std::invalid_argument("alphas must be positive");
  }
  const std::size_t H = alphas.size();
  std::vector<double> combined;
  combined.reserve(cal2.size() + 1);
  for (const NonconformityRecord& r : cal2) {
    if (r.scores.size() != H) throw std::invalid_argument("record length differs from alphas");
    double m = 0.0;
    for (std::size_t h = 0; h < H; ++h) m = std::max(m, alphas[h] * r.scores[h]);
    combined.push_back(m);
  }
  std::sort(combined.begin(), combined.end());
  combined.push_back(kInfinity);
  CPIntervals out;
  out.delta = delta;
  out.H = static_cast<int>(H);
  out.alphas = alphas;
  out.cal2_size = static_cast<int>(cal2.size());
  out.p = conformalRank(cal2.size(), delta);
  out.method = std::move(method);
  double q = combined[std::min<std::size_t>(out.p, combined.size()) - 1];
  for (double a : alphas) out.C.push_back(q / a);
  return out;
}

/// First half of the records (by position) forms cal1, the rest cal2.
inline std::pair<std::vector<NonconformityRecord>, std::vector<NonconformityRecord>> splitHalves(
    const std::vector<NonconformityRecord>& records) {
  std::size_t mid = records.size() / 2;
  return {std::vector<NonconformityRecord>(records.begin(), records.begin() + mid),
          std::vector<NonconformityRecord>(records.begin() + mid, records.end())};
}

/// Alphas from cal1, radii from cal2.
inline CPIntervals calibrateSplit(const std::vector<NonconformityRecord>& cal1,
                                  const std::vector<NonconformityRecord>& cal2, double delta,
                                  const AlphaRoutine& routine = quantileAlphas,
                                  std::string method = "quantile-fallback") {
  return calibrate(cal2, routine(cal1, delta), delta, std::move(method));
}

/// Fraction of records whose scores lie within the radii at every step.
inline double empiricalCoverage(const std::vector<NonconformityRecord>& test,
                                const CPIntervals& intervals) {
  if (test.empty()) return 1.0;
  std::size_t covered = 0;
  for (const NonconformityRecord& r : test) {
    bool ok = true;
    for (std::size_t h = 0; h < r.scores.size() && ok; ++h) ok = r.scores[h] <= intervals.C.at(h);
    covered += ok ? 1 : 0;
  }
  return static_cast<double>(covered) / static_cast<double>(test.size());
}

/// Artifact JSON. An infinite radius is written as null.
inline nlohmann::json toJson(const CPIntervals& c) {
  nlohmann::json radii = nlohmann::json::array();
  for (double x : c.C) radii.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json());
  return {{"delta", c.delta}, {"H", c.H},           {"alphas", c.alphas},
          {"C", radii},       {"cal2_size", c.cal2_size}, {"method", c.method}};
}

inline CPIntervals intervalsFromJson(const nlohmann::json& j) {
  try {
    CPIntervals c;
    c.delta = j.at("delta").get<double>();
    c.H = j.at("H").get<int>();
    c.alphas = j.at("alphas").get<std::vector<double>>();
    for (const auto& x : j.at("C")) c.C.push_back(x.is_null() ? kInfinity : x.get<double>());
    c.cal2_size = j.at("cal2_size").get<int>();
    c.method = j.at("method").get<std::string>();
    if (static_cast<int>(c.C.size()) != c.H || static_cast<int>(c.alphas.size()) != c.H) {
      throw std::invalid_argument("C and alphas must have H entries");
    }
    c.p = conformalRank(c.cal2_size, c.delta);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad calibration artifact: ") + e.what());
  }
}

}  // namespace cpsolver
