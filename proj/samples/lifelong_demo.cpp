// Runs CP-Solver in rolling-horizon mode on the small warehouse and prints
// the final frame plus a metrics summary.

#include <iostream>

#include "cpsolver/sim_bench.hpp"

using namespace cpsolver;

int main(int argc, char** argv) {
  ScenarioConfig cfg;
  cfg.n_controlled = 8;
  cfg.m_uncontrolled = 3;
  cfg.H = 5;
  cfg.w_hat = 5;
  cfg.T_hat = 60;
  if (argc > 1) cfg.map = argv[1];

  ScenarioContext ctx(cfg);
  const CPIntervals& c = ctx.intervals();
  std::cout << "calibrated radii:";
  for (double r : c.C) std::cout << " " << r;
  std::cout << "  (held-out coverage " << ctx.calibration->test_coverage << ")\n";

  for (Method kind : {Method::kIgnore, Method::kCp}) {
    MetricsRecord m = runBaseline(kind, ctx, 1);
    std::cout << methodName(kind) << ": goals " << m.goals_reached << ", throughput "
              << m.throughput << ", collisions " << m.collisions << ", exclusions "
              << m.exclusions << "\n";
  }

  // Start layout: '@' shelf, 'e' task spot, 'U' walker, 'A' controlled agent.
  RunSetup setup = prepareRun(ctx, 1);
  auto walkers = setup.world->positions();
  for (int r = 0; r < ctx.map.height(); ++r) {
    for (int col = 0; col < ctx.map.width(); ++col) {
      Coord x{r, col};
      char ch = !ctx.map.passable(x) ? '@' : ctx.map.isTaskSpot(x) ? 'e' : '.';
      for (const auto& [id, at] : walkers) {
        if (at == x) ch = 'U';
      }
      for (Coord s : setup.starts) {
        if (s == x) ch = 'A';
      }
      std::cout << ch;
    }
    std::cout << "\n";
  }
  return 0;
}
