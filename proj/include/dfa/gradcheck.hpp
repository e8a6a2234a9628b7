#pragma once

// Central finite-difference oracle for the autodiff engine. Runs every op
// (plus a few composite graphs) at f64 over randomized small shapes, compares
// analytic gradients against (L(x+h) - L(x-h)) / 2h with h = 1e-5, and
// reports the worst relative error. Used by the unit tests and by the
// `gradcheck` CLI subcommand.

#include <cstdint>
#include <string>
#include <vector>

namespace dfa {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  int checks = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double max_rel_err = 0.0;
  int total_checks = 0;
  int total_cases = 0;
  bool pass = true;
};

// `rounds` independent randomized shapes per op.
GradCheckReport run_gradcheck(uint64_t seed, double tol = 1e-4, int rounds = 4);

}  // namespace dfa
