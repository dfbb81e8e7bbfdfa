// Command line front end: gen-data, calibrate, solve, lifelong, bench.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cpsolver/sim_bench.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cpsolver;

namespace {

/// Bad flags, bad config files or missing inputs. Maps to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GlobalOptions {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  bool no_timing = false;
};

/// Collects flag values under their config key so that flags override the
/// config file.
class Overrides {
 public:
  template <typename T>
  void add(CLI::App* app, const std::string& flag, const std::string& key,
           const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *value, help);
    setters_.push_back([opt, value, key](json& j) {
      if (opt->count() > 0) j[key] = *value;
    });
  }

  void apply(json& j) const {
    for (const auto& s : setters_) s(j);
  }

 private:
  std::vector<std::function<void(json&)>> setters_;
};

json readJsonFile(const std::string& path, const std::string& flag) {
  std::ifstream in(path);
  if (!in) throw ConfigError(flag + ": cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(flag + ": invalid JSON in '" + path + "': " + e.what());
  }
}

/// Removes and returns the keys only one subcommand understands.
json takeKeys(json& j, const std::vector<std::string>& keys) {
  json out = json::object();
  for (const auto& k : keys) {
    if (j.contains(k)) {
      out[k] = j[k];
      j.erase(k);
    }
  }
  return out;
}

void requireMap(const json& j) {
  std::string ref = j.value("map", std::string("small"));
  if (ref == "small" || ref == "medium" || ref == "large") return;
  if (!fs::exists(ref)) throw ConfigError("--map: no such file '" + ref + "'");
}

ScenarioConfig scenarioOf(const json& j) {
  requireMap(j);
  if (j.contains("calibration") && !j["calibration"].get<std::string>().empty() &&
      !fs::exists(j["calibration"].get<std::string>())) {
    throw ConfigError("--calibration: no such file '" + j["calibration"].get<std::string>() + "'");
  }
  try {
    return scenarioFromJson(j);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

template <typename T>
T extra(const json& j, const std::string& key, T fallback) {
  try {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + key + "'");
  }
}

fs::path outDir(const GlobalOptions& g) {
  fs::path dir(g.out);
  fs::create_directories(dir);
  return dir;
}

void writeFile(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

int cmdGenData(const GlobalOptions& g, json j) {
  json x = takeKeys(j, {"agents", "count", "steps", "train", "val", "test", "cal"});
  ScenarioConfig s = scenarioOf(j);
  const int agents = extra(x, "agents", s.m_uncontrolled);
  const int count = extra(x, "count", 1000);
  const int steps = extra(x, "steps", 64);
  SplitSpec split;
  for (auto [key, field] : {std::pair{"train", &split.train}, std::pair{"val", &split.val},
                            std::pair{"test", &split.test}, std::pair{"cal", &split.cal}}) {
    if (x.contains(key)) *field = extra(x, key, 0);
  }
  if (count < 10) throw ConfigError("--count must be at least 10");
  if (agents < 1 || steps < 2) throw ConfigError("--agents must be >= 1 and --steps >= 2");
  try {
    makeSplits(count, split);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  GridMap map = loadMap(s.map);
  DistanceCache cache(map);
  auto ds = generateDataset(map, cache, agents, count, steps, s.seed, split, g.jobs);
  fs::path dir = outDir(g);
  std::ofstream lines(dir / "dataset.jsonl");
  std::ofstream manifest(dir / "manifest.json");
  writeDataset(ds, lines, manifest);
  std::cout << json{{"dataset", (dir / "dataset.jsonl").string()},
                    {"manifest", (dir / "manifest.json").string()},
                    {"trajectories", count}}
                   .dump()
            << "\n";
  return 0;
}

int cmdCalibrate(const GlobalOptions& g, json j) {
  json x = takeKeys(j, {"dataset"});
  ScenarioConfig s = scenarioOf(j);
  GridMap map = loadMap(s.map);
  DistanceCache cache(map);
  TrajectoryDataset ds;
  std::string dataset = extra(x, "dataset", std::string());
  if (!dataset.empty()) {
    fs::path dir(dataset);
    if (!fs::exists(dir / "dataset.jsonl") || !fs::exists(dir / "manifest.json")) {
      throw ConfigError("--dataset: '" + dataset + "' lacks dataset.jsonl or manifest.json");
    }
    std::ifstream lines(dir / "dataset.jsonl");
    std::ifstream manifest(dir / "manifest.json");
    ds = readDataset(lines, manifest);
  } else {
    int d = std::max(s.calib_trajectories, s.calib_cal + s.calib_test);
    ds = generateDataset(map, cache, std::max(s.m_uncontrolled, 1), d,
                         std::max(s.calib_T, s.window + s.H + 1), s.seed,
                         {d - s.calib_cal - s.calib_test, 0, s.calib_test, s.calib_cal}, g.jobs);
  }
  if (ds.splits.cal.size() < 2) throw ConfigError("dataset has fewer than two calibration trajectories");
  auto predictor = makePredictor(s.predictor, map, cache);
  CalibrationReport r = calibrateOnDataset(ds, *predictor, s.H, s.delta);
  fs::path dir = outDir(g);
  writeFile(dir / "calibration.json", toJson(r.intervals).dump(2) + "\n");
  json summary = toJson(r.intervals);
  summary["p"] = r.intervals.p;
  summary["test_coverage"] = r.test_coverage;
  summary["test_size"] = r.test_size;
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmdSolve(const GlobalOptions& g, json j) {
  json x = takeKeys(j, {"method"});
  j["mode"] = "open";
  ScenarioConfig s = scenarioOf(j);
  std::string method = extra(x, "method", std::string("CP"));
  ScenarioContext ctx(s);
  fs::path dir = outDir(g);
  json out;
  if (method == "ECBS" || method == "CBS") {
    // Plain MAPF over the same starts and goals, uncontrolled agents unseen.
    RunSetup setup = prepareRun(ctx, s.seed);
    MapfInstance inst;
    inst.map = &ctx.map;
    inst.distances = ctx.cache.get();
    inst.agents = setup.tasks;
    SolverConfig sc;
    sc.mode = method == "CBS" ? SolverMode::kCbsOptimal : SolverMode::kEcbs;
    sc.w = s.w;
    sc.time_budget_s = s.solver_time_budget_s;
    out = solutionToJson(solve(inst, sc), !g.no_timing);
  } else {
    Method kind;
    try {
      kind = methodFromName(method);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--method: ") + e.what());
    }
    std::ofstream log(dir / "events.jsonl");
    Solution sol;
    MetricsRecord m = runBaseline(kind, ctx, s.seed, &log, &sol);
    if (m.solve_failed) throw std::runtime_error(m.abort_reason);
    out = solutionToJson(sol, !g.no_timing);
    out["metrics"] = toJson(m, !g.no_timing);
  }
  out["method"] = method;
  writeFile(dir / "solution.json", out.dump(2) + "\n");
  std::cout << out.dump() << "\n";
  return 0;
}

int cmdLifelong(const GlobalOptions& g, json j) {
  json x = takeKeys(j, {"method"});
  j["mode"] = "closed";
  ScenarioConfig s = scenarioOf(j);
  Method kind;
  try {
    kind = methodFromName(extra(x, "method", std::string("CP")));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("--method: ") + e.what());
  }
  ScenarioContext ctx(s);
  fs::path dir = outDir(g);
  std::ofstream log(dir / "events.jsonl");
  MetricsRecord m = runBaseline(kind, ctx, s.seed, &log);
  json out = toJson(m, !g.no_timing);
  out["method"] = methodName(kind);
  writeFile(dir / "metrics.json", out.dump(2) + "\n");
  std::cout << out.dump() << "\n";
  return 0;
}

/// Expands a "sweep" object of key -> list into one config per combination.
std::vector<json> expandSweep(const json& base, const json& sweep) {
  std::vector<json> configs{base};
  for (const auto& [key, values] : sweep.items()) {
    if (!values.is_array() || values.empty()) {
      throw ConfigError("sweep." + key + " must be a nonempty list");
    }
    std::vector<json> next;
    for (const json& c : configs) {
      for (const json& v : values) {
        json d = c;
        d[key] = v;
        next.push_back(d);
      }
    }
    configs = std::move(next);
  }
  return configs;
}

int cmdBench(const GlobalOptions& g, json j) {
  json x = takeKeys(j, {"kinds", "seeds", "sweep"});
  std::vector<Method> kinds;
  for (const auto& name : extra(x, "kinds", std::vector<std::string>{"IGNORE", "OBSTACLE", "PRED", "CP"})) {
    try {
      kinds.push_back(methodFromName(name));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--kinds: ") + e.what());
    }
  }
  const int n_seeds = extra(x, "seeds", 3);
  if (n_seeds < 1) throw ConfigError("--seeds must be >= 1");
  std::vector<json> configs = expandSweep(j, extra(x, "sweep", json::object()));
  std::vector<ScenarioConfig> scenarios;
  for (const json& c : configs) scenarios.push_back(scenarioOf(c));  // validate everything first

  std::vector<BenchRow> rows;
  for (const ScenarioConfig& s : scenarios) {
    ScenarioContext ctx(s);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < n_seeds; ++i) seeds.push_back(s.seed + i);
    auto part = runMatrix(ctx, kinds, seeds, g.jobs, !g.no_timing);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  fs::path dir = outDir(g);
  std::ostringstream csv;
  writeCsv(csv, rows);
  writeFile(dir / "results.csv", csv.str());
  const std::vector<std::string> keys{"map", "kind", "n_controlled", "m_uncontrolled", "delta", "H", "w_hat"};
  std::ostringstream summary;
  writeSummaryCsv(summary, keys, aggregate(rows, keys));
  writeFile(dir / "summary.csv", summary.str());
  std::cout << summary.str();
  return 0;
}

void printError(const GlobalOptions& g, const std::string& kind, const std::string& message) {
  json rec = {{"error", {{"kind", kind}, {"message", message}}}};
  std::cerr << rec.dump() << "\n";
  std::error_code ec;
  if (fs::is_directory(g.out, ec)) {
    std::ofstream(fs::path(g.out) / "error.json") << rec.dump(2) << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal-prediction MAPF among uncontrolled agents"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config, "JSON config file; flags override its keys");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--seed", g.seed, "Base random seed");
  app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--no-timing", g.no_timing, "Zero all runtime fields");

  auto scenarioFlags = [](CLI::App* sub, Overrides& o) {
    o.add<std::string>(sub, "--map", "map", "Warehouse size (small/medium/large) or map file");
    o.add<int>(sub, "--n-controlled", "n_controlled", "Controlled agents");
    o.add<int>(sub, "--m-uncontrolled", "m_uncontrolled", "Uncontrolled agents");
    o.add<double>(sub, "--delta", "delta", "Miscoverage level");
    o.add<int>(sub, "--H", "H", "Prediction horizon");
    o.add<int>(sub, "--w-hat", "w_hat", "Conflict horizon");
    o.add<double>(sub, "--w", "w", "Focal suboptimality bound");
    o.add<int>(sub, "--T-hat", "T_hat", "Lifelong horizon");
    o.add<std::string>(sub, "--predictor", "predictor",
                       "astar-goal, constant, or an external predictor command line");
    o.add<std::string>(sub, "--calibration", "calibration", "Calibration artifact");
    o.add<std::string>(sub, "--policy", "policy", "Obstacles past the horizon: persist or drop");
  };

  Overrides gen_o, cal_o, solve_o, life_o, bench_o;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate uncontrolled-agent trajectories");
  scenarioFlags(gen, gen_o);
  gen_o.add<int>(gen, "--agents", "agents", "Agents per trajectory");
  gen_o.add<int>(gen, "--count", "count", "Number of trajectories");
  gen_o.add<int>(gen, "--steps", "steps", "Timesteps per trajectory");
  gen_o.add<int>(gen, "--train", "train", "Training split size");
  gen_o.add<int>(gen, "--val", "val", "Validation split size");
  gen_o.add<int>(gen, "--cal", "cal", "Calibration split size");
  gen_o.add<int>(gen, "--test", "test", "Test split size");

  CLI::App* cal = app.add_subcommand("calibrate", "Calibrate prediction regions");
  scenarioFlags(cal, cal_o);
  cal_o.add<std::string>(cal, "--dataset", "dataset", "Directory written by gen-data");

  CLI::App* sol = app.add_subcommand("solve", "One-shot planning");
  scenarioFlags(sol, solve_o);
  solve_o.add<std::string>(sol, "--method", "method", "IGNORE, OBSTACLE, PRED, CP, ECBS or CBS");

  CLI::App* life = app.add_subcommand("lifelong", "Rolling-horizon lifelong run");
  scenarioFlags(life, life_o);
  life_o.add<std::string>(life, "--method", "method", "IGNORE, OBSTACLE, PRED or CP");

  CLI::App* bench = app.add_subcommand("bench", "Baseline comparison matrix");
  scenarioFlags(bench, bench_o);
  bench_o.add<std::string>(bench, "--mode", "mode", "open or closed");
  bench_o.add<int>(bench, "--seeds", "seeds", "Seeds per scenario");
  bench_o.add<std::vector<std::string>>(bench, "--kinds", "kinds", "Subset of the baselines");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    printError(g, "config", e.what());
    return 2;
  }

  try {
    json j = g.config.empty() ? json::object() : readJsonFile(g.config, "--config");
    if (!j.is_object()) throw ConfigError("--config: top level must be an object");
    if (g.seed) j["seed"] = *g.seed;
    if (gen->parsed()) {
      gen_o.apply(j);
      return cmdGenData(g, j);
    }
    if (cal->parsed()) {
      cal_o.apply(j);
      return cmdCalibrate(g, j);
    }
    if (sol->parsed()) {
      solve_o.apply(j);
      return cmdSolve(g, j);
    }
    if (life->parsed()) {
      life_o.apply(j);
      return cmdLifelong(g, j);
    }
    bench_o.apply(j);
    return cmdBench(g, j);
  } catch (const ConfigError& e) {
    printError(g, "config", e.what());
    return 2;
  } catch (const ParseError& e) {
    printError(g, "config", e.what());
    return 2;
  } catch (const std::exception& e) {
    printError(g, "runtime", e.what());
    return 1;
  }
}
