#include <doctest.h>

#include <cmath>
#include <random>

#include "robustctl/hjbi.hpp"
#include "robustctl/verification.hpp"
#include "fixtures.hpp"

using namespace rctl;

namespace {

ProblemSpec discount_problem(double lambda, double c = 0.0) {
  auto s = ProblemSpec::zeros(1, 1, 1);
  s.f = parse_expression("-" + format_double(lambda) + " * y + " + format_double(c), {"y"});
  s.mu = lambda;
  return s;
}

EvaluationPoint point1(double x, double v, double p, double a, double u) {
  EvaluationPoint pt;
  pt.x = {x};
  pt.v = v;
  pt.p = {p};
  pt.A = Eigen::MatrixXd::Constant(1, 1, a);
  pt.u = {u};
  return pt;
}

ValueField sample_field(const Grid& g, double (*fn)(double)) {
  ValueField f;
  f.grid = g;
  for (std::size_t i = 0; i < g.size(); ++i) f.values.push_back(fn(g.coordinate(i, 0)));
  return f;
}

using testing::coarse_example;

}  // namespace

TEST_CASE("H matrix") {
  const auto spec = example57_problem(1.0);
  CompiledProblem cp(spec);
  CHECK(compute_H(cp, point1(0.3, 0.0, 2.0, 0.0, 1.0)).value(0, 0) == 0.0);
  CHECK(compute_H(cp, point1(0.0, 0.0, 5.0, 1.0, 1.0)).value(0, 0) == 1.0);
  CHECK(compute_H(spec, point1(1.0, 0.0, 0.0, 3.0, 0.5)).value(0, 0) == doctest::Approx(3.0 * 2.25));

  auto g = ProblemSpec::zeros(1, 2, 1);
  g.gamma.dimension = 2;
  g.gamma.candidates = {Eigen::MatrixXd::Identity(2, 2)};
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) g.g[i][j] = Expression::constant(0.75);
  }
  EvaluationPoint pt;
  pt.x = {1.0};
  pt.p = {1.0};
  pt.A = Eigen::MatrixXd::Ones(1, 1);
  pt.u = {0.0};
  const HMatrix h = compute_H(g, pt);
  CHECK(h.value(0, 1) == 1.5);
  CHECK(h.value(1, 1) == 1.5);
  CHECK_FALSE(h.flagged());

  auto hp = ProblemSpec::zeros(1, 1, 1);
  hp.h[0][0][0] = parse_expression("x1", {"x1"});
  CHECK(compute_H(hp, point1(2.0, 0.0, 3.0, 0.0, 0.0)).value(0, 0) == 12.0);
}

TEST_CASE("z is derived from p and sigma") {
  const auto spec = example57_problem(1.0);
  CompiledProblem cp(spec);
  CHECK(point1(0.5, 0.0, 2.0, 0.0, 0.25).z(cp) == std::vector<double>{1.5});
}

TEST_CASE("HJBI residual at a point") {
  const auto spec = example57_problem(1.0);
  CompiledProblem cp(spec);
  for (double x : {-2.0, 0.0, 0.7, 3.0}) {
    const auto r = hjbi_residual_at(cp, {x}, (x - 1.0) / 2.0, {0.5}, Eigen::MatrixXd::Zero(1, 1));
    CHECK(std::fabs(r.residual) <= 1e-15);
    CHECK(r.control_index == 32);
    CHECK(r.control == std::vector<double>{1.0});
    // integrand is (1 - u) / 2 at every lattice point
    auto pt = point1(x, (x - 1.0) / 2.0, 0.5, 0.0, 0.0);
    CHECK(hjbi_integrand(cp, pt) == doctest::Approx(0.5));
  }

  const auto r = hjbi_residual_at(spec, {1.0}, 0.0, {0.0}, Eigen::MatrixXd::Zero(1, 1));
  CHECK(r.residual == doctest::Approx(0.0));
  CHECK(r.control == std::vector<double>{1.0});

  const auto zero = ProblemSpec::zeros(1, 1, 1);
  const auto z = hjbi_residual_at(zero, {0.4}, 1.0, {2.0}, Eigen::MatrixXd::Ones(1, 1));
  CHECK(z.residual == 0.0);
  CHECK(z.control_index == 0);
}

TEST_CASE("parabolic step examples") {
  const Grid g = build_grid({{-2.0, 2.0}}, {41});
  const ValueField sq = sample_field(g, [](double x) { return x * x; });

  const auto zero = ProblemSpec::zeros(1, 1, 1);
  CHECK(parabolic_step(zero, sq, 0.01).values == sq.values);

  const auto disc = discount_problem(2.0);
  const ValueField d = parabolic_step(disc, sq, 0.01);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(d.values[i] == doctest::Approx(sq.values[i] * 0.98));

  auto diff = ProblemSpec::zeros(1, 1, 1);
  diff.sigma[0][0] = Expression::constant(0.7);
  const double dt = 1e-3;
  const ValueField q = parabolic_step(diff, sq, dt);
  for (std::size_t node : g.interior_nodes()) {
    CHECK(std::fabs(q.values[node] - sq.values[node] - 0.49 * dt) <= 1e-12);
  }
  REQUIRE(q.policy.has_value());
  CHECK(q.policy->size() == g.size());
}

TEST_CASE("parabolic step refuses unstable steps") {
  const Grid g = build_grid({{-2.0, 2.0}}, {41});
  auto diff = ProblemSpec::zeros(1, 1, 1);
  diff.sigma[0][0] = Expression::constant(1.0);
  const ValueField f(g, std::vector<double>(g.size(), 0.0));
  HjbiOperator op(diff, g);
  const double bound = op.max_stable_dt(f.values);
  // rate = sigma_hi2 * n * sigma^2 / h^2 = 100
  CHECK(bound == doctest::Approx(0.009));
  CHECK_NOTHROW(parabolic_step(diff, f, bound));
  try {
    parabolic_step(diff, f, 2.0 * bound);
    FAIL("expected a CFL error");
  } catch (const CflError& e) {
    CHECK(e.admissible() == doctest::Approx(bound));
    CHECK(e.requested() == doctest::Approx(2.0 * bound));
  }
  CHECK_THROWS_AS(parabolic_step(diff, f, -1.0), ValidationError);
  CHECK(default_dt(op, f.values) == doctest::Approx(1.0 / 112.0));
}

TEST_CASE("two-dimensional stencil is exact on quadratics") {
  auto s = ProblemSpec::zeros(2, 1, 1);
  s.sigma[0][0] = Expression::constant(1.0);
  s.sigma[1][0] = Expression::constant(1.0);
  const Grid g = build_grid({{-1.0, 1.0}, {-1.0, 1.0}}, {21, 21});
  ValueField f;
  f.grid = g;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto x = g.point(i);
    f.values.push_back(x[0] * x[1] + x[0] * x[0]);
  }
  const double dt = 1e-4;
  const ValueField out = parabolic_step(s, f, dt);
  // sigma^T A sigma = 2 + 2 * 1 + 0, G = 2
  for (std::size_t node : g.interior_nodes()) CHECK(std::fabs(out.values[node] - f.values[node] - 2.0 * dt) <= 1e-12);

  s.sigma[1][0] = Expression::constant(0.5);
  CHECK_THROWS_AS(parabolic_step(s, f, dt), SchemeError);
}

TEST_CASE("backward semigroup") {
  const Grid g = build_grid({{-2.0, 2.0}}, {21});
  const ValueField c(g, std::vector<double>(g.size(), 3.0));
  const auto zero = ProblemSpec::zeros(1, 1, 1);
  CHECK(backward_semigroup(zero, 1.0, c, 0.1).values == c.values);

  const auto disc = discount_problem(1.5);
  const ValueField out = backward_semigroup(disc, 0.5, c, 0.01);
  for (double v : out.values) {
    CHECK(v == doctest::Approx(3.0 * std::pow(1.0 - 0.015, 50)).epsilon(1e-13));
    CHECK(v == doctest::Approx(3.0 * std::exp(-0.75)).epsilon(1e-2));
  }
  CHECK_THROWS_AS(backward_semigroup(disc, 0.5, c, 0.3), ValidationError);
  CHECK_THROWS_AS(backward_semigroup(disc, 0.0, c, 0.1), ValidationError);
}

TEST_CASE("semigroup composition is bit-identical") {
  const auto spec = example57_problem(1.0);
  const Grid g = build_grid({{-5.0, 5.0}}, {101});
  const ValueField f = sample_field(g, [](double x) { return std::sin(x) + 0.1 * x * x; });
  HjbiOperator op(spec, g);
  const double dt = 0.5 * default_dt(op, f.values);
  const double s1 = 40 * dt, s2 = 70 * dt;
  const ValueField whole = backward_semigroup(spec, s1 + s2, f, dt);
  const ValueField parts = backward_semigroup(spec, s1, backward_semigroup(spec, s2, f, dt), dt);
  CHECK(whole.values == parts.values);
}

TEST_CASE("monotone comparison on random pairs") {
  const auto spec = example57_problem(1.0);
  const Grid g = build_grid({{-5.0, 5.0}}, {101});
  HjbiOperator op(spec, g);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  std::exponential_distribution<double> gap(1.0);
  const double dt = default_dt(op, std::vector<double>(g.size(), 0.0));
  std::vector<double> a(g.size()), b(g.size()), oa(g.size()), ob(g.size());
  std::vector<std::size_t> arg(g.size());
  for (int trial = 0; trial < 50; ++trial) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      a[i] = 2.0 * n01(rng);
      b[i] = a[i] + (i % 3 == 0 ? 0.0 : gap(rng));
    }
    op.step(a, dt, oa, arg);
    op.step(b, dt, ob, arg);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(oa[i] <= ob[i] + 1e-12);
  }
}

TEST_CASE("sup-norm contraction of one step") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n01;
  for (const auto& spec : {discount_problem(2.0), example57_problem(1.0)}) {
    const Grid g = build_grid({{-5.0, 5.0}}, {81});
    HjbiOperator op(spec, g);
    const double mu = *spec.mu;
    const double cfl = op.max_stable_dt(std::vector<double>(g.size(), 0.0));
    std::vector<double> a(g.size()), b(g.size()), oa(g.size()), ob(g.size());
    std::vector<std::size_t> arg(g.size());
    for (double frac : {0.5, 0.25, 0.1}) {
      const double dt = frac * cfl;
      for (int trial = 0; trial < 10; ++trial) {
        double before = 0.0, after = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          a[i] = n01(rng);
          b[i] = n01(rng);
          before = std::max(before, std::fabs(a[i] - b[i]));
        }
        op.step(a, dt, oa, arg);
        op.step(b, dt, ob, arg);
        for (std::size_t i = 0; i < g.size(); ++i) after = std::max(after, std::fabs(oa[i] - ob[i]));
        CHECK(after <= (1.0 - 0.5 * mu * dt) * before);
      }
    }
  }
}

TEST_CASE("stencil integrand converges to the analytic one") {
  const auto spec = example57_problem(1.0);
  CompiledProblem cp(spec);
  auto V = [](double x) { return std::exp(-0.25 * x * x) + 0.3 * x; };
  auto dV = [](double x) { return -0.5 * x * std::exp(-0.25 * x * x) + 0.3; };
  auto d2V = [](double x) { return (0.25 * x * x - 0.5) * std::exp(-0.25 * x * x); };
  double prev = 0.0;
  for (int count : {101, 201, 401}) {
    const Grid g = build_grid({{-5.0, 5.0}}, {count});
    std::vector<double> values;
    for (std::size_t i = 0; i < g.size(); ++i) values.push_back(V(g.coordinate(i, 0)));
    HjbiOperator op(spec, g);
    double worst = 0.0;
    for (std::size_t node : g.interior_nodes()) {
      const double x = g.coordinate(node, 0);
      for (double u : {0.0, 0.5, 1.0}) {
        const double numeric = op.integrand(node, {u}, values);
        const double exact = hjbi_integrand(cp, point1(x, V(x), dV(x), d2V(x), u));
        worst = std::max(worst, std::fabs(numeric - exact));
      }
    }
    if (prev > 0.0) CHECK(worst < 0.6 * prev);
    prev = worst;
  }
  CHECK(prev < 0.05);
}

TEST_CASE("hamiltonian is independent of the worker count") {
  const auto spec = example57_problem(1.0);
  const Grid g = build_grid({{-5.0, 5.0}}, {301});
  std::vector<double> v;
  for (std::size_t i = 0; i < g.size(); ++i) v.push_back(std::cos(g.coordinate(i, 0)));
  HjbiOperator one(spec, g, 1), four(spec, g, 4);
  std::vector<double> a(g.size()), b(g.size());
  std::vector<std::size_t> ia(g.size()), ib(g.size());
  one.hamiltonian(v, a, ia);
  four.hamiltonian(v, b, ib);
  CHECK(a == b);
  CHECK(ia == ib);
}

TEST_CASE("elliptic solve of the discount-only problem") {
  const Grid g = build_grid({{-1.0, 1.0}}, {11});
  const auto r = solve_elliptic(discount_problem(2.0, 3.0), g, 1e-10);
  CHECK(r.report.converged);
  for (double v : r.field.values) CHECK(v == doctest::Approx(1.5).epsilon(1e-8));
  // dt = 1/3, so each unit window multiplies the error by (1 - 2/3)^3
  CHECK(r.report.dt == doctest::Approx(1.0 / 3.0));
  CHECK(r.report.fitted_rate == doctest::Approx(std::log(27.0)));
  CHECK(r.report.history_monotone);
  CHECK(r.report.growth_ok);
}

TEST_CASE("elliptic solve of the zero problem") {
  const Grid g = build_grid({{-1.0, 1.0}}, {11});
  const auto zero = ProblemSpec::zeros(1, 1, 1);
  CHECK_THROWS_AS(solve_elliptic(zero, g, 1e-6), ValidationError);
  SolveOptions opt;
  opt.max_horizon = 5.0;
  const auto r = solve_elliptic(zero, g, 1e-6, std::nullopt, opt);
  CHECK(r.report.converged);
  for (double v : r.field.values) CHECK(v == 0.0);
}

TEST_CASE("elliptic solve reports non-convergence") {
  const Grid g = build_grid({{-1.0, 1.0}}, {11});
  SolveOptions opt;
  opt.max_horizon = 2.0;
  const auto r = solve_elliptic(discount_problem(0.5, 1.0), g, 1e-9, std::nullopt, opt);
  CHECK_FALSE(r.report.converged);
  CHECK(r.report.diagnostics.find("no convergence") != std::string::npos);
  CHECK(r.field.values.size() == g.size());
  CHECK_THROWS_AS(solve_elliptic(discount_problem(0.5, 1.0), g, 0.0), ValidationError);
}

TEST_CASE("builtin example on a coarse grid") {
  const auto& r = coarse_example();
  const auto& g = r.field.grid;
  CHECK(r.report.converged);
  double worst = 0.0;
  for (std::size_t node : g.interior_nodes()) {
    const double x = g.coordinate(node, 0);
    worst = std::max(worst, std::fabs(r.field.values[node] - example57_oracle(1.0, x).value));
    CHECK((*r.field.policy)[node] == 32);
  }
  CHECK(worst <= 2e-2);
  CHECK(r.report.fitted_rate >= 0.8);
  CHECK(r.report.history_monotone);
  CHECK(r.report.residual_norm <= 1e-5);

  const auto spec = example57_problem(1.0);
  const auto policy = extract_policy(spec, r.field);
  for (std::size_t node : g.interior_nodes()) CHECK(policy[node] == 32);
}

TEST_CASE("policy extraction tie-break and enumeration") {
  const Grid g = build_grid({{-1.0, 1.0}}, {11});
  const ValueField f(g, std::vector<double>(g.size(), 0.25));
  const auto flat = extract_policy(discount_problem(1.0), f);
  for (std::size_t p : flat) CHECK(p == 0);

  auto quad = ProblemSpec::zeros(1, 1, 1);
  quad.f = parse_expression("-y + (u1 - 0.3) ^ 2", {"y", "u1"});
  const auto q = extract_policy(quad, f);
  for (std::size_t p : q) CHECK(p == quad.controls.nearest_index({0.3}));
}

TEST_CASE("dynamic programming residual") {
  const Grid small = build_grid({{-1.0, 1.0}}, {11});
  const auto zero = ProblemSpec::zeros(1, 1, 1);
  CHECK(dpp_residual(zero, ValueField(small, std::vector<double>(small.size(), 0.0)), 0.1) == 0.0);

  const auto spec = example57_problem(1.0);
  const auto& r = coarse_example();
  CHECK(dpp_residual(spec, r.field, 0.1) <= 3e-6);

  ValueField bump = r.field;
  bump.values[bump.grid.nearest_node(std::vector<double>{0.5})] += 0.5;
  CHECK(dpp_residual(spec, bump, 0.1) >= 0.1);
  CHECK_THROWS_AS(dpp_residual(spec, r.field, -0.1), ValidationError);
}

TEST_CASE("horizon truncation decays at the discount rate") {
  for (double lambda : {1.0, 2.0}) {
    CAPTURE(lambda);
    const auto spec = lambda == 1.0 ? example57_problem(1.0) : discount_problem(2.0, 1.0);
    const Grid g = build_grid({{-5.0, 5.0}}, {lambda == 1.0 ? 101 : 11});
    const auto snaps = horizon_snapshots(spec, g, {2, 4, 6, 8, 12, 16});
    std::vector<double> diffs;
    for (auto [a, b] : {std::pair{0, 1}, {1, 3}, {2, 4}, {3, 5}}) {
      double worst = 0.0;
      for (std::size_t node : g.interior_nodes()) {
        worst = std::max(worst, std::fabs(snaps[a].values[node] - snaps[b].values[node]));
      }
      diffs.push_back(worst);
    }
    // slope of log diff against T in {2, 4, 6, 8}
    double st = 0.0, sl = 0.0, stt = 0.0, stl = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double t = 2.0 * (k + 1), l = std::log(diffs[k]);
      st += t;
      sl += l;
      stt += t * t;
      stl += t * l;
    }
    const double rate = -(4 * stl - st * sl) / (4 * stt - st * st);
    CHECK(rate >= 0.8 * lambda);
  }
}
