#include "robustctl/verification.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "robustctl/hjbi.hpp"

namespace rctl {

ProblemSpec example57_problem(double lambda) {
  if (!(lambda > 0.0)) throw ValidationError("lambda must be positive");
  ProblemSpec s = ProblemSpec::zeros(1, 1, 1);
  const std::set<std::string> xu{"x1", "u1"};
  s.b[0] = parse_expression("-x1 + u1", xu);
  s.sigma[0][0] = parse_expression("x1 + u1", xu);
  s.psi = parse_expression("x1 - u1", xu);
  s.lambda = lambda;
  s.f = discounted_running_cost(lambda, *s.psi);
  s.controls = ControlSet{{0.0}, {1.0}, 33};
  s.gamma.sigma_lo2 = 0.25;
  s.gamma.sigma_hi2 = 1.0;
  s.mu = lambda;
  s.validate();
  return s;
}

OracleValue example57_oracle(double lambda, double x) {
  if (!(lambda > 0.0)) throw ValidationError("lambda must be positive");
  return {(x - 1.0) / (lambda + 1.0), 1.0};
}

namespace {

VerificationReport finish(std::vector<double> pointwise, const Grid& grid, double tolerance, std::string source) {
  VerificationReport r;
  r.tolerance = tolerance;
  r.derivatives = std::move(source);
  r.nodes = pointwise.size();
  const auto& interior = grid.interior_nodes();
  double sum = 0.0;
  for (std::size_t i = 0; i < pointwise.size(); ++i) {
    sum += pointwise[i];
    if (pointwise[i] > r.sup || i == 0) {
      r.sup = pointwise[i];
      r.worst_node = interior[i];
    }
  }
  if (!pointwise.empty()) {
    r.mean = sum / static_cast<double>(pointwise.size());
    r.worst_x = grid.point(r.worst_node);
  }
  r.mean = std::min(r.mean, r.sup);
  r.pass = r.sup <= tolerance;
  r.pointwise = std::move(pointwise);
  return r;
}

void check_control(const ProblemSpec& spec, const ControlPolicy& ctrl) {
  spec.validate();
  ctrl.validate(spec.controls, spec.m);
}

}  // namespace

VerificationReport verify_control_residual(const ProblemSpec& spec, const ValueField& field,
                                           const ControlPolicy& ctrl, double tolerance) {
  check_control(spec, ctrl);
  field.validate();
  HjbiOperator op(spec, field.grid);
  std::vector<double> pointwise;
  for (std::size_t node : field.grid.interior_nodes()) {
    const auto u = ctrl.at(field.grid.point(node));
    pointwise.push_back(std::fabs(op.integrand(node, u, field.values)));
  }
  return finish(std::move(pointwise), field.grid, tolerance, "stencil");
}

VerificationReport verify_control_residual(const ProblemSpec& spec, const Grid& grid, const AnalyticValue& analytic,
                                           const ControlPolicy& ctrl, double tolerance) {
  check_control(spec, ctrl);
  if (!analytic.value || !analytic.gradient || !analytic.hessian) {
    throw ValidationError("analytic derivatives need value, gradient and Hessian callbacks");
  }
  if (grid.dimension() != spec.n) throw ValidationError("grid dimension must equal n");
  CompiledProblem cp(spec);
  std::vector<double> pointwise;
  for (std::size_t node : grid.interior_nodes()) {
    EvaluationPoint pt;
    pt.x = grid.point(node);
    pt.v = analytic.value(pt.x);
    pt.p = analytic.gradient(pt.x);
    pt.A = analytic.hessian(pt.x);
    pt.u = ctrl.at(pt.x);
    pointwise.push_back(std::fabs(hjbi_integrand(cp, pt)));
  }
  return finish(std::move(pointwise), grid, tolerance, "analytic");
}

GrowthLipschitz fit_growth_lipschitz(const ValueField& field, std::size_t max_pairs, std::uint64_t seed) {
  field.validate();
  const auto& nodes = field.grid.interior_nodes();
  if (nodes.size() < 2) throw ValidationError("need at least two interior nodes");
  std::vector<std::vector<double>> pts;
  std::vector<double> norms;
  for (std::size_t node : nodes) {
    pts.push_back(field.grid.point(node));
    double r2 = 0.0;
    for (double c : pts.back()) r2 += c * c;
    norms.push_back(std::sqrt(r2));
  }
  GrowthLipschitz r;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    r.c_growth = std::max(r.c_growth, std::fabs(field.values[nodes[i]]) / (1.0 + norms[i] * norms[i]));
  }
  auto ratio = [&](std::size_t i, std::size_t j) {
    double d2 = 0.0;
    for (std::size_t k = 0; k < pts[i].size(); ++k) d2 += (pts[i][k] - pts[j][k]) * (pts[i][k] - pts[j][k]);
    const double dist = std::sqrt(d2);
    return std::fabs(field.values[nodes[i]] - field.values[nodes[j]]) / ((1.0 + norms[i] + norms[j]) * dist);
  };
  const std::size_t N = nodes.size();
  const std::size_t all = N * (N - 1) / 2;
  if (all <= max_pairs) {
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t j = i + 1; j < N; ++j) r.c_lip = std::max(r.c_lip, ratio(i, j));
    }
    r.pairs = all;
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, N - 1);
    while (r.pairs < max_pairs) {
      const std::size_t i = pick(rng), j = pick(rng);
      if (i == j) continue;
      r.c_lip = std::max(r.c_lip, ratio(i, j));
      ++r.pairs;
    }
  }
  return r;
}

}  // namespace rctl
