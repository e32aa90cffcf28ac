// Acceptance run: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "robustctl/cli.hpp"
#include "robustctl/hjbi.hpp"
#include "robustctl/montecarlo.hpp"
#include "robustctl/verification.hpp"

using namespace rctl;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_file(p)); }

ValueField read_field(const fs::path& p, const ControlSet& u) {
  std::ifstream in(p);
  return read_value_csv(in, u);
}

double interior_sup_diff(const Grid& g, const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t node : g.interior_nodes()) worst = std::max(worst, std::fabs(a[node] - b[node]));
  return worst;
}

// Least-squares slope of -log ||V_T - V_2T|| against T in {2, 4, 6, 8}.
double truncation_rate(const ProblemSpec& spec, const Grid& g) {
  const auto snaps = horizon_snapshots(spec, g, {2, 4, 6, 8, 12, 16});
  double st = 0.0, sl = 0.0, stt = 0.0, stl = 0.0;
  const std::pair<int, int> pairs[] = {{0, 1}, {1, 3}, {2, 4}, {3, 5}};
  for (int k = 0; k < 4; ++k) {
    const double t = 2.0 * (k + 1);
    const double l = std::log(interior_sup_diff(g, snaps[pairs[k].first].values, snaps[pairs[k].second].values));
    st += t;
    sl += l;
    stt += t * t;
    stl += t * l;
  }
  return -(4 * stl - st * sl) / (4 * stt - st * st);
}

ProblemSpec discount_only(double lambda) {
  auto s = ProblemSpec::zeros(1, 1, 1);
  s.psi = Expression::constant(1.0);
  s.lambda = lambda;
  s.f = discounted_running_cost(lambda, *s.psi);
  s.mu = lambda;
  return s;
}

ProblemSpec linear_sde(const std::string& b, const std::string& sigma) {
  auto s = ProblemSpec::zeros(1, 1, 1);
  s.b[0] = parse_expression(b, {"x1", "u1"});
  s.sigma[0][0] = parse_expression(sigma, {"x1", "u1"});
  s.f = parse_expression("-y", {"y"});
  return s;
}

Eigen::MatrixXd random_symmetric(std::mt19937_64& rng, int d) {
  std::normal_distribution<double> n(0.0, 2.0);
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j) a(i, j) = a(j, i) = n(rng);
  }
  return a;
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / ("robustctl_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(work);
  const auto total = std::chrono::steady_clock::now();

  const ProblemSpec ex = example57_problem(1.0);
  const ControlPolicy u_one = ControlPolicy::constant({1.0});

  // 1. Value and policy of the builtin example through the CLI.
  ValueField fine;
  {
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = run({"solve", "--problem", "example57", "--lambda", "1", "--threads", "1", "--out-dir",
                        (work / "solve1").string()});
    const double took = seconds_since(t0);
    bool pass = rc == 0;
    double err = INFINITY;
    bool policy_ok = false;
    if (pass) {
      fine = read_field(work / "solve1" / "value.csv", ex.controls);
      err = 0.0;
      policy_ok = fine.policy.has_value();
      for (std::size_t node : fine.grid.interior_nodes()) {
        err = std::max(err, std::fabs(fine.values[node] - example57_oracle(1.0, fine.grid.coordinate(node, 0)).value));
        if (policy_ok && ex.controls.lattice_point((*fine.policy)[node])[0] != 1.0) policy_ok = false;
      }
      pass = err <= 2e-2 && policy_ok && took <= 60.0 && fine.grid.size() == 401;
    }
    report(1, pass, "sup error " + fmt("%.3e", err) + " (<= 2e-2), policy u=1 everywhere: " +
                        (policy_ok ? "yes" : "no") + ", runtime " + fmt("%.1f", took) + " s (<= 60)");
  }

  // 2. Horizon truncation rate.
  {
    const double r_ex = truncation_rate(ex, build_grid({{-5.0, 5.0}}, {201}));
    const double r_disc = truncation_rate(discount_only(2.0), build_grid({{-5.0, 5.0}}, {201}));
    report(2, r_ex >= 0.8 * 1.0 && r_disc >= 0.8 * 2.0,
           "fitted rate " + fmt("%.4f", r_ex) + " (>= 0.8, mu=1), discount-only " + fmt("%.4f", r_disc) +
               " (>= 1.6, mu=2)");
  }

  // 3. Dynamic programming residual of the solved field.
  {
    bool pass = !fine.values.empty();
    double r = INFINITY;
    if (pass) {
      r = dpp_residual(ex, fine, 0.1);
      pass = r <= 5.0 * 1e-6;
    }
    report(3, pass, "dpp residual at s=0.1 " + fmt("%.3e", r) + " (<= 5e-6)");
  }

  // 4. Monotone comparison on random ordered pairs.
  {
    const Grid g = build_grid({{-5.0, 5.0}}, {401});
    HjbiOperator op(ex, g);
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> val(-3.0, 3.0), gap(0.0, 1.0);
    double worst = -INFINITY;
    std::vector<double> phi(g.size()), psi(g.size()), a(g.size()), b(g.size());
    std::vector<std::size_t> arg(g.size());
    for (int k = 0; k < 50; ++k) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        phi[i] = val(rng) * (1.0 + std::fabs(g.coordinate(i, 0)));
        psi[i] = phi[i] + (k % 5 == 0 ? 0.0 : gap(rng));
      }
      const double dt = std::min(default_dt(op, phi), default_dt(op, psi));
      op.step(phi, dt, a, arg);
      op.step(psi, dt, b, arg);
      for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, a[i] - b[i]);
    }
    report(4, worst <= 1e-12, "max step(phi) - step(psi) over 50 pairs " + fmt("%.3e", worst) + " (<= 1e-12)");
  }

  // 5. Discounted-cost identity through the CLI.
  {
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = run({"cost", "--problem", "example57", "--lambda", "1", "--threads", "1", "--out-dir",
                        (work / "cost1").string()});
    const double took = seconds_since(t0);
    bool pass = rc == 0 && took <= 120.0;
    std::string detail;
    if (rc == 0) {
      const auto j = read_json(work / "cost1" / "cost_summary.json");
      pass = pass && j["dt"].get<double>() == 1e-3 && j["T_cut"].get<double>() == 15.0 &&
             j["n_paths"].get<std::size_t>() == 100000 && j["points"].size() == 3;
      for (const auto& p : j["points"]) {
        const double x0 = p["x0"][0].get<double>();
        const double v = p["value"].get<double>(), se = p["std_error"].get<double>();
        const double exact = example57_oracle(1.0, x0).value;
        const double pde = fine.values.empty() ? INFINITY : fine.values[fine.grid.nearest_node(std::vector<double>{x0})];
        const bool ok = std::fabs(v - exact) <= 3.0 * se && std::fabs(v - exact) <= 1e-2 && std::fabs(v - pde) <= 3e-2;
        pass = pass && ok;
        detail += "x0=" + fmt("%g", x0) + ": " + fmt("%.5f", v) + " +- " + fmt("%.1e", se) + " vs " +
                  fmt("%.5f", exact) + " (" + fmt("%.2f", std::fabs(v - exact) / se) + " SE), pde " +
                  fmt("%.5f", pde) + "; ";
      }
    }
    report(5, pass, detail + "runtime " + fmt("%.1f", took) + " s (<= 120)");
  }

  // 6. G-function properties.
  {
    UncertaintySet g1;
    g1.sigma_lo2 = 0.25;
    g1.sigma_hi2 = 1.0;
    UncertaintySet g2;
    g2.dimension = 2;
    g2.sigma_lo2 = 0.25;
    g2.sigma_hi2 = 1.0;
    Eigen::MatrixXd mixed(2, 2);
    mixed << 0.6, 0.2, 0.2, 0.5;
    g2.candidates = {0.25 * Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2), mixed};
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> scale(0.0, 5.0);
    double worst = 0.0;
    for (const auto* gamma : {&g1, &g2}) {
      const int d = gamma->dimension;
      for (int k = 0; k < 100; ++k) {
        const Eigen::MatrixXd a = random_symmetric(rng, d), b = random_symmetric(rng, d);
        const Eigen::MatrixXd l = random_symmetric(rng, d);
        const Eigen::MatrixXd above = b + l * l.transpose();
        const double c = scale(rng);
        worst = std::max(worst, std::fabs(g_of(*gamma, c * a) - c * g_of(*gamma, a)));
        worst = std::max(worst, g_of(*gamma, a + b) - g_of(*gamma, a) - g_of(*gamma, b));
        const double diff = g_of(*gamma, above) - g_of(*gamma, b);
        const double tr = (above - b).trace();
        worst = std::max(worst, 0.5 * gamma->sigma_lo2 * tr - diff);
        worst = std::max(worst, diff - 0.5 * gamma->sigma_hi2 * tr);
      }
    }
    report(6, worst <= 1e-12, "largest violation over 200 inputs " + fmt("%.3e", worst) + " (<= 1e-12)");
  }

  // 7. Exponential martingale moments, per scenario.
  {
    bool pass = true;
    std::string detail;
    std::uint64_t seed = 70;
    for (double q : {ex.gamma.sigma_lo2, ex.gamma.sigma_hi2}) {
      for (double p : {1.0, 2.0, 3.0}) {
        for (double alpha : {0.0, 0.5}) {
          const auto m = exp_martingale_moment(alpha, Eigen::MatrixXd::Constant(1, 1, q), ex.gamma, p, 1.0, 100000,
                                               seed++);
          pass = pass && m.estimate <= m.bound + 3.0 * m.std_error;
          if (p == 2.0 && alpha == 0.5) {
            const double z = std::fabs(m.estimate - std::exp(0.25)) / m.std_error;
            pass = pass && z <= 3.0;
            detail += "Q=" + fmt("%g", q) + " p=2 a=0.5: " + fmt("%.5f", m.estimate) + " vs e^0.25 (" +
                      fmt("%.2f", z) + " SE), bound " + fmt("%.4f", m.bound) + "; ";
          }
        }
      }
    }
    report(7, pass, detail + "all 12 moments under their bounds: " + (pass ? "yes" : "no"));
  }

  // 8. Flow contraction.
  {
    const double dt = 1e-3;
    const auto ode = flow_contraction_estimate(linear_sde("-x1", "0"), {2.0}, {-1.0}, Eigen::MatrixXd::Constant(1, 1, 1.0),
                                               u_one, dt, 1.0, 1000, 81, 1.0);
    double worst = 0.0;
    const double exact = std::pow(1.0 - dt, 2000) * 9.0;
    for (double v : ode.per_path) worst = std::max(worst, std::fabs(v - exact));

    const ProblemSpec sde = linear_sde("-2 * x1", "0.5 * x1");
    SampleBox box;
    box.x_lower = {-3.0};
    box.x_upper = {3.0};
    const double eta = check_assumptions(sde, box, 2000, 8).eta_hat;
    const auto c = flow_contraction_estimate(sde, {1.0}, {0.0}, Eigen::MatrixXd::Constant(1, 1, 1.0), u_one, dt, 1.0,
                                             100000, 82, eta);
    const bool pass = ode.pass && worst <= 1e-10 && c.estimate <= c.bound + 3.0 * c.std_error;
    report(8, pass, "sigma=0 per-path error " + fmt("%.2e", worst) + " (<= 1e-10); linear SDE " +
                        fmt("%.5f", c.estimate) + " +- " + fmt("%.1e", c.std_error) + " <= bound " +
                        fmt("%.5f", c.bound) + " (eta_hat " + fmt("%.4f", eta) + ")");
  }

  // 9. Growth and Lipschitz constants under refinement.
  {
    const SolveResult coarse = solve_elliptic(ex, build_grid({{-5.0, 5.0}}, {201}), 1e-6);
    const auto a = fit_growth_lipschitz(coarse.field);
    bool pass = !fine.values.empty();
    double change = INFINITY;
    GrowthLipschitz b;
    if (pass) {
      b = fit_growth_lipschitz(fine);
      change = std::fabs(b.c_lip - a.c_lip) / a.c_lip;
      pass = std::isfinite(a.c_growth) && std::isfinite(b.c_growth) && std::isfinite(a.c_lip) &&
             std::isfinite(b.c_lip) && a.c_lip > 0.0 && change < 0.2;
    }
    report(9, pass, "C_lip " + fmt("%.5f", a.c_lip) + " -> " + fmt("%.5f", b.c_lip) + " (change " +
                        fmt("%.2e", change) + " < 0.2), C_growth " + fmt("%.5f", a.c_growth) + " -> " +
                        fmt("%.5f", b.c_growth));
  }

  // 10. Verification residual of the closed-form value.
  {
    AnalyticValue v;
    v.value = [](const std::vector<double>& x) { return example57_oracle(1.0, x[0]).value; };
    v.gradient = [](const std::vector<double>&) { return std::vector<double>{0.5}; };
    v.hessian = [](const std::vector<double>&) { return Eigen::MatrixXd::Zero(1, 1); };
    const Grid g = build_grid({{-5.0, 5.0}}, {401});
    const auto good = verify_control_residual(ex, g, v, u_one, 1e-10);
    const auto bad = verify_control_residual(ex, g, v, ControlPolicy::constant({0.0}), 1e-10);
    double off = 0.0;
    for (double r : bad.pointwise) off = std::max(off, std::fabs(r - 0.5));
    report(10, good.sup <= 1e-10 && off <= 1e-10 && !bad.pointwise.empty(),
           "u=1 residual " + fmt("%.2e", good.sup) + " (<= 1e-10); u=0 max |r - 0.5| " + fmt("%.2e", off) +
               " (<= 1e-10)");
  }

  // 11. Identical outputs for 1 and 4 threads.
  {
    bool pass = true;
    std::string detail;
    const std::string t4 = (work / "t4").string();
    const std::string t1 = (work / "t1").string();
    pass = run({"solve", "--problem", "example57", "--threads", "4", "--out-dir", t4}) == 0;
    for (const auto& [dir, threads] : {std::pair{t1, "1"}, std::pair{t4, "4"}}) {
      pass = pass && run({"simulate", "--problem", "example57", "--threads", threads, "--out-dir", dir}) == 0;
      pass = pass && run({"cost", "--problem", "example57", "--threads", threads, "--n-paths", "2000", "--out-dir",
                          dir}) == 0;
    }
    auto same = [&](const fs::path& a, const fs::path& b) {
      const bool eq = fs::exists(a) && read_file(a) == read_file(b);
      detail += b.filename().string() + (eq ? " same; " : " DIFFERS; ");
      return eq;
    };
    pass = pass && same(work / "solve1" / "value.csv", work / "t4" / "value.csv");
    pass = pass && same(work / "solve1" / "solve_report.json", work / "t4" / "solve_report.json");
    pass = pass && same(work / "t1" / "simulate_summary.json", work / "t4" / "simulate_summary.json");
    pass = pass && same(work / "t1" / "paths_2_0.csv", work / "t4" / "paths_2_0.csv");
    pass = pass && same(work / "t1" / "cost_summary.json", work / "t4" / "cost_summary.json");
    report(11, pass, detail);
  }

  fs::remove_all(work);
  std::printf("total %.1f s, %d of 11 criteria failed\n", seconds_since(total), failures);
  return failures == 0 ? 0 : 1;
}
