#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace climb {

struct GradSuiteRow {
  std::string op;
  int instances = 0;
  int64_t coords = 0;       // finite-difference coordinates probed in total
  double max_rel_err = 0.0;
  bool pass = false;
  std::string error;  // first exception text, if an instance threw
};

struct GradSuiteReport {
  std::vector<GradSuiteRow> rows;
  double tolerance = 1e-4;
  double seconds = 0.0;
  bool all_pass = false;
};

// Central finite-difference sweep over every differentiable operation the
// library exposes — elementwise math, matmul, convolutions, reductions,
// structural ops, softmax, sort, the selective scan, the nn layers, the
// Mamba block, self/cross-attention, and the four autoencoder losses. Each
// op is checked on `instances` independently drawn problem instances;
// failure means some coordinate's relative error reached `tolerance`.
GradSuiteReport run_grad_suite(uint64_t seed = 17, int instances = 10,
                               double tolerance = 1e-4);

// One line per op: PASS/FAIL, instance count, coords, worst relative error.
std::string grad_suite_text(const GradSuiteReport& report);

}  // namespace climb
