#include <doctest.h>

#include <cmath>
#include <sstream>

#include "robustctl/montecarlo.hpp"
#include "robustctl/verification.hpp"
#include "fixtures.hpp"

using namespace rctl;

namespace {

Eigen::MatrixXd q1(double v) { return Eigen::MatrixXd::Constant(1, 1, v); }

ProblemSpec linear_problem(const std::string& b, const std::string& sigma, double lo2 = 1.0, double hi2 = 1.0) {
  auto s = ProblemSpec::zeros(1, 1, 1);
  s.b[0] = parse_expression(b, {"x1", "u1"});
  s.sigma[0][0] = parse_expression(sigma, {"x1", "u1"});
  s.gamma.sigma_lo2 = lo2;
  s.gamma.sigma_hi2 = hi2;
  return s;
}

ProblemSpec with_cost(ProblemSpec s, double lambda, const std::string& psi) {
  s.psi = parse_expression(psi, {"x1", "u1"});
  s.lambda = lambda;
  s.f = discounted_running_cost(lambda, *s.psi);
  return s;
}

const auto kOne = ControlPolicy::constant({1.0});

}  // namespace

TEST_CASE("frozen dynamics stay put") {
  const auto s = ProblemSpec::zeros(1, 1, 1);
  const auto b = simulate_gsde(s, {0.7}, kOne, VolatilityPolicy::constant(q1(1.0)), 0.1, 1.0, 20, 3);
  CHECK(b.steps == 10);
  for (std::size_t p = 0; p < b.n_paths; ++p) {
    for (std::size_t k = 0; k <= b.steps; ++k) CHECK(b.state(p, k)[0] == 0.7);
  }
  CHECK(b.flagged_count == 0);
}

TEST_CASE("deterministic drift follows the Euler recursion") {
  const auto s = linear_problem("-x1", "0");
  const double dt = 1e-3;
  const auto b = simulate_gsde(s, {1.0}, kOne, VolatilityPolicy::constant(q1(1.0)), dt, 1.0, 8, 1);
  for (std::size_t p = 0; p < b.n_paths; ++p) {
    const double x = b.state(p, b.steps)[0];
    CHECK(x == doctest::Approx(std::pow(1.0 - dt, 1000)).epsilon(1e-12));
    CHECK(std::fabs(x - std::exp(-1.0)) <= dt);
  }
}

TEST_CASE("mean of the builtin dynamics is volatility free") {
  const auto s = example57_problem(1.0);
  for (double q : {0.25, 1.0}) {
    const auto b = simulate_gsde(s, {3.0}, kOne, VolatilityPolicy::constant(q1(q)), 0.01, 1.0, 4000, 17);
    const auto e = terminal_estimate(b, [](std::span<const double> x) { return x[0]; });
    // Euler mean recursion m' = m + dt (1 - m)
    const double exact = 1.0 + 2.0 * std::pow(0.99, 100);
    CHECK(std::fabs(e.mean - exact) <= 4.0 * e.std_error);
    CHECK(std::fabs(exact - (1.0 + 2.0 * std::exp(-1.0))) <= 0.01);
  }
}

TEST_CASE("martingale sanity") {
  const auto s = linear_problem("0", "0.8");
  const auto b = simulate_gsde(s, {2.0}, kOne, VolatilityPolicy::constant(q1(1.0)), 0.05, 2.0, 5000, 8);
  const auto e = terminal_estimate(b, [](std::span<const double> x) { return x[0]; });
  CHECK(std::fabs(e.mean - 2.0) <= 4.0 * e.std_error);
  const auto v = terminal_estimate(b, [](std::span<const double> x) { return (x[0] - 2.0) * (x[0] - 2.0); });
  CHECK(std::fabs(v.mean - 0.64 * 2.0) <= 4.0 * v.std_error);
}

TEST_CASE("bundles do not depend on worker count or block size") {
  const auto s = example57_problem(1.0);
  const auto vol = VolatilityPolicy::schedule({{0.0, q1(0.25)}, {0.3, q1(1.0)}});
  const auto a = simulate_gsde(s, {0.5}, kOne, vol, 0.01, 0.6, 300, 99, {1, 256});
  const auto b = simulate_gsde(s, {0.5}, kOne, vol, 0.01, 0.6, 300, 99, {4, 7});
  CHECK(a.states == b.states);
  CHECK(a.increments == b.increments);
  CHECK(a.qv == b.qv);
  const auto c = simulate_gsde(s, {0.5}, kOne, vol, 0.01, 0.6, 300, 100, {1, 256});
  CHECK(a.states != c.states);
  CHECK(a.qv_at(0, 0)[0] == doctest::Approx(0.0025));
  CHECK(a.qv_at(0, 59)[0] == doctest::Approx(0.01));
}

TEST_CASE("quadratic variation bookkeeping is exact") {
  auto s = ProblemSpec::zeros(1, 1, 1);
  s.h[0][0][0] = Expression::constant(1.0);
  s.gamma.sigma_lo2 = 0.25;
  const auto vol = VolatilityPolicy::schedule({{0.0, q1(0.5)}, {0.5, q1(1.0)}, {0.8, q1(0.25)}});
  const auto b = simulate_gsde(s, {0.0}, kOne, vol, 0.1, 1.0, 3, 0);
  for (std::size_t p = 0; p < b.n_paths; ++p) {
    for (std::size_t k = 0; k < b.steps; ++k) CHECK(b.state(p, k + 1)[0] == b.state(p, k)[0] + b.qv_at(p, k)[0]);
  }
}

TEST_CASE("overflowing paths are flagged and frozen") {
  const auto s = linear_problem("x1 * x1", "0");
  const auto b = simulate_gsde(s, {10.0}, kOne, VolatilityPolicy::constant(q1(1.0)), 0.1, 3.0, 5, 0);
  CHECK(b.flagged_count == 5);
  for (std::size_t p = 0; p < b.n_paths; ++p) {
    CHECK(std::isfinite(b.state(p, b.steps)[0]));
    CHECK(b.state(p, b.steps)[0] == b.state(p, b.steps - 1)[0]);
  }
  const auto e = terminal_estimate(b, [](std::span<const double> x) { return x[0]; });
  CHECK(e.n_paths == 0);
}

TEST_CASE("policy validation") {
  const auto s = example57_problem(1.0);
  CHECK_THROWS_AS(simulate_gsde(s, {0.0}, kOne, VolatilityPolicy::constant(q1(2.0)), 0.1, 1.0, 2, 0),
                  ValidationError);
  CHECK_THROWS_AS(simulate_gsde(s, {0.0}, ControlPolicy::constant({1.5}), VolatilityPolicy::constant(q1(1.0)),
                                0.1, 1.0, 2, 0),
                  ValidationError);
  CHECK_THROWS_AS(VolatilityPolicy::schedule({{0.1, q1(1.0)}}), ValidationError);
  CHECK_THROWS_AS(VolatilityPolicy::schedule({{0.0, q1(1.0)}, {0.0, q1(0.5)}}), ValidationError);
  CHECK_THROWS_AS(simulate_gsde(s, {0.0}, kOne, VolatilityPolicy::constant(q1(1.0)), 0.0, 1.0, 2, 0),
                  ValidationError);
  CHECK_THROWS_AS(simulate_gsde(s, {0.0}, kOne, VolatilityPolicy::constant(q1(1.0)), 0.1, 1.0, 0, 0),
                  ValidationError);
  CHECK_THROWS_AS(simulate_gsde(s, {0.0, 1.0}, kOne, VolatilityPolicy::constant(q1(1.0)), 0.1, 1.0, 2, 0),
                  ValidationError);
  ValueField no_policy(build_grid({{-1.0, 1.0}}, {5}), std::vector<double>(5, 0.0));
  CHECK_THROWS_AS(ControlPolicy::feedback(no_policy, s.controls), ValidationError);
}

TEST_CASE("paths CSV layout") {
  const auto s = example57_problem(1.0);
  const auto b = simulate_gsde(s, {0.0}, kOne, VolatilityPolicy::constant(q1(0.5)), 0.5, 1.0, 2, 4);
  std::ostringstream out;
  write_paths_csv(out, b);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "path,step,t,x1,q11");
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].rfind("0,0,0,0,", 0) == 0);
  CHECK(rows[0].substr(rows[0].rfind(',') + 1) == "0.25");
  CHECK(rows[2].back() == ',');
  CHECK(rows[3].rfind("1,0,", 0) == 0);
}

TEST_CASE("robust expectation") {
  auto r = robust_expectation({{3.0, 0.1, 10}});
  CHECK(r.value == 3.0);
  CHECK(r.index == 0);
  CHECK(r.std_error == 0.1);
  r = robust_expectation({{1.0, 0.2, 10}, {2.0, 0.3, 10}, {2.0, 0.1, 10}});
  CHECK(r.value == 2.0);
  CHECK(r.index == 1);
  CHECK_THROWS_AS(robust_expectation({}), ValidationError);
}

TEST_CASE("convex payoff prefers the high-volatility scenario") {
  const auto s = linear_problem("0", "1", 0.25, 1.0);
  auto sq = [](std::span<const double> x) { return x[0] * x[0]; };
  std::vector<McEstimate> est;
  for (double q : {0.25, 1.0}) {
    const auto b = simulate_gsde(s, {0.0}, kOne, VolatilityPolicy::constant(q1(q)), 0.05, 2.0, 4000, 21);
    est.push_back(terminal_estimate(b, sq));
  }
  const auto r = robust_expectation(est);
  CHECK(r.index == 1);
  CHECK(std::fabs(r.value - 2.0) <= 4.0 * r.std_error);
  CHECK(est[1].mean >= est[0].mean - 3.0 * std::hypot(est[0].std_error, est[1].std_error));
}

TEST_CASE("discounted cost of constant running costs") {
  const auto base = linear_problem("-x1 + u1", "x1 + u1", 0.25, 1.0);
  const std::vector<VolatilityPolicy> family{VolatilityPolicy::constant(q1(0.25)),
                                             VolatilityPolicy::constant(q1(1.0))};
  const double lambda = 2.0, dt = 0.01, T = 10.0;
  const auto one = discounted_cost(with_cost(base, lambda, "1"), {0.0}, kOne, family, dt, T, 50, 1);
  // trapezoid rule on e^{-lambda s} over [0, T]
  const double a = std::exp(-lambda * dt);
  const double trap = dt * ((1.0 - std::pow(a, 1000)) / (1.0 - a) - 0.5 + 0.5 * std::pow(a, 1000));
  CHECK(one.robust.value == doctest::Approx(trap).epsilon(1e-12));
  CHECK(std::fabs(one.robust.value - 1.0 / lambda) <= 1e-4);
  CHECK(one.tail_bound == doctest::Approx(std::exp(-20.0) / 2.0));

  const auto zero = discounted_cost(with_cost(base, lambda, "0"), {0.0}, kOne, family, dt, T, 50, 1);
  CHECK(zero.robust.value == 0.0);
  CHECK(zero.scenarios.size() == 2);
}

TEST_CASE("discounted cost of the builtin example") {
  const auto s = example57_problem(1.0);
  const std::vector<VolatilityPolicy> family{VolatilityPolicy::constant(q1(0.25)),
                                             VolatilityPolicy::constant(q1(1.0))};
  const auto r = discounted_cost(s, {3.0}, kOne, family, 0.01, 8.0, 4000, 2);
  for (const auto& sc : r.scenarios) {
    CHECK(std::fabs(sc.estimate.mean - 1.0) <= 3.0 * sc.estimate.std_error + 0.02);
  }
  CHECK(r.flagged == 0);
  CHECK(r.T_cut == doctest::Approx(8.0));
  CHECK_THROWS_AS(discounted_cost(s, {3.0}, kOne, family, 0.01, 4.0, 10, 2), ValidationError);
  CHECK_THROWS_AS(discounted_cost(s, {3.0}, kOne, {}, 0.01, 8.0, 10, 2), ValidationError);
  auto no_psi = s;
  no_psi.psi.reset();
  CHECK_THROWS_AS(discounted_cost(no_psi, {3.0}, kOne, family, 0.01, 8.0, 10, 2), ValidationError);
}

TEST_CASE("discounted cost is reproducible across worker counts") {
  const auto s = example57_problem(1.0);
  const std::vector<VolatilityPolicy> family{VolatilityPolicy::constant(q1(1.0))};
  const auto a = discounted_cost(s, {0.0}, kOne, family, 0.02, 5.0, 700, 5, {1, 256});
  const auto b = discounted_cost(s, {0.0}, kOne, family, 0.02, 5.0, 700, 5, {4, 64});
  CHECK(a.robust.value == b.robust.value);
  CHECK(a.robust.std_error == b.robust.std_error);
}

TEST_CASE("feedback volatility dominates constant scenarios") {
  const auto s = example57_problem(1.0);
  const auto& solved = testing::coarse_example();
  const auto ctrl = ControlPolicy::feedback(solved.field, s.controls);
  const std::vector<VolatilityPolicy> family{VolatilityPolicy::constant(q1(0.25)),
                                             VolatilityPolicy::constant(q1(1.0)),
                                             VolatilityPolicy::feedback(solved.field)};
  const auto r = discounted_cost(s, {0.5}, ctrl, family, 0.01, 6.0, 2000, 12);
  const auto& fb = r.scenarios[2].estimate;
  for (int k = 0; k < 2; ++k) CHECK(fb.mean >= r.scenarios[k].estimate.mean - 3.0 * fb.std_error);
  CHECK(r.scenarios[2].scenario == family[2].name());
}

TEST_CASE("exponential martingale moments") {
  UncertaintySet g;
  g.sigma_lo2 = 0.25;
  g.sigma_hi2 = 1.0;
  const auto m1 = exp_martingale_moment(0.5, q1(1.0), g, 1.0, 1.0, 20000, 1);
  CHECK(m1.bound == 1.0);
  CHECK(std::fabs(m1.estimate - 1.0) <= 3.0 * m1.std_error);
  const auto m0 = exp_martingale_moment(0.0, q1(0.5), g, 3.0, 1.0, 100, 1);
  CHECK(m0.estimate == 1.0);
  const auto m2 = exp_martingale_moment(0.5, q1(0.25), g, 2.0, 1.0, 50000, 2);
  CHECK(m2.exact == doctest::Approx(std::exp(0.25)));
  CHECK(std::fabs(m2.estimate - std::exp(0.25)) <= 3.0 * m2.std_error);
  // C_G = 1 + (1 + 4) / 2
  CHECK(m2.bound == doctest::Approx(std::exp(3.5 * 2.0 * 0.25)));
  CHECK(m2.bound > m2.exact);
  CHECK_THROWS_AS(exp_martingale_moment(0.5, q1(1.0), g, 0.5, 1.0, 10, 1), ValidationError);
  CHECK_THROWS_AS(exp_martingale_moment(0.5, q1(2.0), g, 2.0, 1.0, 10, 1), ValidationError);
}

TEST_CASE("flow contraction") {
  const auto same = flow_contraction_estimate(example57_problem(1.0), {1.0}, {1.0}, q1(1.0), kOne, 0.01, 1.0,
                                              100, 3, 0.0);
  CHECK(same.estimate == 0.0);
  CHECK(same.pass);

  const auto ode = linear_problem("-x1", "0");
  const double dt = 1e-3;
  const auto r = flow_contraction_estimate(ode, {2.0}, {-1.0}, q1(1.0), kOne, dt, 1.0, 64, 3, 1.0);
  for (double v : r.per_path) CHECK(std::fabs(v - std::pow(1.0 - dt, 2000) * 9.0) <= 1e-10);
  CHECK(r.pass);

  const auto sde = linear_problem("-2 * x1", "0.5 * x1");
  SampleBox box;
  box.x_lower = {-3.0};
  box.x_upper = {3.0};
  auto with_f = sde;
  with_f.f = parse_expression("-y", {"y"});
  const double eta = check_assumptions(with_f, box, 500, 0).eta_hat;
  CHECK(eta == doctest::Approx(0.875));
  const auto c = flow_contraction_estimate(sde, {1.0}, {0.0}, q1(1.0), kOne, 1e-3, 1.0, 4000, 9, eta);
  CHECK(std::fabs(c.estimate - std::exp(-3.75)) <= 4.0 * c.std_error + 0.01 * std::exp(-3.75));
  CHECK(c.pass);
  CHECK(c.bound == doctest::Approx(std::exp(-1.75)));
}
