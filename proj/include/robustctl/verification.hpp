#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "robustctl/grid.hpp"
#include "robustctl/montecarlo.hpp"
#include "robustctl/problem.hpp"

namespace rctl {

/// Builtin example: b = -x + u, h = 0, sigma = x + u, U = [0, 1],
/// f = -lambda y + x - u, g = 0, Gamma = [0.25, 1], mu = lambda.
ProblemSpec example57_problem(double lambda);

struct OracleValue {
  double value = 0.0;
  double u_star = 1.0;
};

/// V(x) = (x - 1) / (lambda + 1), u* = 1.
OracleValue example57_oracle(double lambda, double x);

struct VerificationReport {
  double sup = 0.0;
  double mean = 0.0;
  std::size_t worst_node = 0;
  std::vector<double> worst_x;
  double tolerance = 0.0;
  bool pass = false;
  std::size_t nodes = 0;
  std::string derivatives;      // "stencil" or "analytic"
  std::vector<double> pointwise; // |residual| per interior node, in interior order
};

/// Closed-form value, gradient and Hessian of a candidate V.
struct AnalyticValue {
  std::function<double(const std::vector<double>&)> value;
  std::function<std::vector<double>(const std::vector<double>&)> gradient;
  std::function<Eigen::MatrixXd(const std::vector<double>&)> hessian;
};

/// |G(H) + <p, b> + f| at every interior node with u = ctrl(x), derivatives
/// from the solver stencils applied to field.values.
VerificationReport verify_control_residual(const ProblemSpec& spec, const ValueField& field,
                                           const ControlPolicy& ctrl, double tolerance);

/// Same, with value and derivatives from `analytic` at the interior nodes of `grid`.
VerificationReport verify_control_residual(const ProblemSpec& spec, const Grid& grid, const AnalyticValue& analytic,
                                           const ControlPolicy& ctrl, double tolerance);

struct GrowthLipschitz {
  double c_growth = 0.0;
  double c_lip = 0.0;
  std::size_t pairs = 0;
};

/// C_growth = max |V| / (1 + |x|^2) and C_lip = max |V(x) - V(y)| /
/// ((1 + |x| + |y|) |x - y|) over interior nodes; all pairs when there are at
/// most `max_pairs`, otherwise that many seeded random pairs.
GrowthLipschitz fit_growth_lipschitz(const ValueField& field, std::size_t max_pairs = 100000,
                                     std::uint64_t seed = 0);

}  // namespace rctl
