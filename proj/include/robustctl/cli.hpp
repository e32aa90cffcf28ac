#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "robustctl/problem.hpp"

namespace rctl {

struct SolverSettings {
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<int> counts;
  double tol = 1e-6;
  std::optional<double> mu;
  std::optional<double> dt;
  std::optional<double> max_horizon;
};

struct McSettings {
  double dt = 1e-3;
  double T_cut = 15.0;
  std::optional<double> T;                 // simulate horizon, default T_cut
  std::size_t n_paths = 100000;
  std::uint64_t seed = 0;
  std::vector<std::vector<double>> x0;     // one or more start points
  std::vector<std::string> family;         // lo, hi, q<k>, feedback; empty: every extreme point
  std::optional<std::vector<double>> control;  // constant control; absent: solved feedback
};

struct ProblemFile {
  ProblemSpec spec;
  SolverSettings solver;
  McSettings mc;
};

/// Reads a sectioned key = value problem file, or the builtin "example57".
///
/// Sections: [dimensions] [dynamics] [cost] [uncertainty] [control] [solver]
/// [mc]. Lines starting with '#' or ';' are comments. `lambda` overrides the
/// discount rate of the psi shorthand (and of the builtin).
ProblemFile load_problem(const std::string& path, std::optional<double> lambda = std::nullopt);

ProblemFile parse_problem(const std::string& text, std::optional<double> lambda = std::nullopt);

/// Builtin example with its default solver and Monte Carlo settings.
ProblemFile example57_file(double lambda);

/// Command-line entry point; args exclude the program name.
/// Exit codes: 0 success, 2 validation error, 3 numerical failure.
int run(const std::vector<std::string>& args);

}  // namespace rctl
