#pragma once

#include "robustctl/hjbi.hpp"
#include "robustctl/verification.hpp"

namespace rctl::testing {

// Builtin example (lambda = 1) solved once on [-5, 5] x 201 and shared by test cases.
inline const SolveResult& coarse_example() {
  static const SolveResult r = [] {
    return solve_elliptic(example57_problem(1.0), build_grid({{-5.0, 5.0}}, {201}), 1e-6);
  }();
  return r;
}

}  // namespace rctl::testing
