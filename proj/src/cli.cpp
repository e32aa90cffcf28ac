#include "robustctl/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "robustctl/grid.hpp"
#include "robustctl/hjbi.hpp"
#include "robustctl/montecarlo.hpp"
#include "robustctl/verification.hpp"

namespace rctl {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

struct Entry {
  std::string value;
  int line = 0;
};

using Section = std::map<std::string, Entry>;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void fail(int line, const std::string& msg) {
  throw ValidationError("line " + std::to_string(line) + ": " + msg);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double to_double(const Entry& e) {
  try {
    std::size_t used = 0;
    const double v = std::stod(e.value, &used);
    if (used != e.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    fail(e.line, "expected a number, got '" + e.value + "'");
  }
}

long long to_integer(const Entry& e) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(e.value, &used);
    if (used != e.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    fail(e.line, "expected an integer, got '" + e.value + "'");
  }
}

std::vector<double> to_list(const Entry& e) {
  std::vector<double> out;
  for (const auto& item : split(e.value, ',')) out.push_back(to_double({item, e.line}));
  return out;
}

Eigen::MatrixXd to_matrix(const Entry& e, int d) {
  const auto rows = split(e.value, ';');
  if (static_cast<int>(rows.size()) != d) fail(e.line, "matrix needs " + std::to_string(d) + " rows");
  Eigen::MatrixXd q(d, d);
  for (int i = 0; i < d; ++i) {
    const auto row = to_list({rows[i], e.line});
    if (static_cast<int>(row.size()) != d) fail(e.line, "matrix needs " + std::to_string(d) + " columns");
    for (int j = 0; j < d; ++j) q(i, j) = row[j];
  }
  return q;
}

// "12", "1_2" and "12_3" style index suffixes; indices are 1-based.
std::optional<std::vector<int>> indices(const std::string& rest, std::size_t count) {
  auto parts = split(rest, '_');
  std::vector<int> out;
  if (parts.size() != count) {
    std::string digits;
    for (const auto& p : parts) digits += p;
    if (digits.size() != count) return std::nullopt;
    parts.clear();
    for (char c : digits) parts.emplace_back(1, c);
  }
  for (const auto& p : parts) {
    if (p.empty() || p.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
    out.push_back(std::stoi(p));
  }
  return out;
}

std::map<std::string, Section> read_sections(const std::string& text) {
  static const std::set<std::string> known{"dimensions", "dynamics", "cost", "uncertainty",
                                           "control", "solver", "mc"};
  std::map<std::string, Section> sections;
  std::istringstream in(text);
  std::string raw;
  std::string current;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string s = trim(raw);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']') fail(line, "unterminated section header");
      current = trim(s.substr(1, s.size() - 2));
      if (!known.contains(current)) fail(line, "unknown section [" + current + "]");
      if (sections.contains(current)) fail(line, "section [" + current + "] repeated");
      sections[current];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(line, "expected key = value");
    if (current.empty()) fail(line, "key outside of any section");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty()) fail(line, "empty key");
    if (value.empty()) fail(line, "empty value for '" + key + "'");
    if (sections[current].contains(key)) fail(line, "duplicate key '" + key + "'");
    sections[current][key] = {value, line};
  }
  return sections;
}

Expression to_expression(const Entry& e, const std::vector<std::string>& names) {
  try {
    return parse_expression(e.value, std::set<std::string>(names.begin(), names.end()));
  } catch (const ExpressionError& err) {
    std::string msg = err.what();
    if (err.kind() == ExpressionError::Kind::Syntax) msg += " (column " + std::to_string(err.offset() + 1) + ")";
    fail(e.line, msg);
  }
}

// Fills the transpose of every (i, j) entry given only once.
template <typename T>
void symmetrise(std::vector<std::vector<T>>& m, std::vector<std::vector<bool>>& given) {
  const std::size_t d = m.size();
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (given[i][j] && !given[j][i]) {
        m[j][i] = m[i][j];
        given[j][i] = true;
      }
    }
  }
}

}  // namespace

ProblemFile example57_file(double lambda) {
  ProblemFile pf;
  pf.spec = example57_problem(lambda);
  pf.solver.lower = {-5.0};
  pf.solver.upper = {5.0};
  pf.solver.counts = {401};
  pf.solver.tol = 1e-6;
  pf.solver.mu = pf.spec.mu;
  pf.mc.x0 = {{-2.0}, {0.0}, {3.0}};
  pf.mc.control = std::vector<double>{1.0};
  pf.mc.T = 1.0;
  // The running cost is affine in X and the drift is volatility free, so every
  // constant scenario has the same expected cost; one suffices.
  pf.mc.family = {"hi"};
  return pf;
}

ProblemFile parse_problem(const std::string& text, std::optional<double> lambda_override) {
  auto sections = read_sections(text);
  auto take = [&](const std::string& sec, const std::string& key) -> std::optional<Entry> {
    auto it = sections.find(sec);
    if (it == sections.end()) return std::nullopt;
    auto kt = it->second.find(key);
    if (kt == it->second.end()) return std::nullopt;
    Entry e = kt->second;
    it->second.erase(kt);
    return e;
  };

  ProblemFile pf;
  auto dim = [&](const char* key, int fallback) {
    const auto e = take("dimensions", key);
    if (!e) return fallback;
    const long long v = to_integer(*e);
    if (v < 0 || v > 64) fail(e->line, std::string(key) + " out of range");
    return static_cast<int>(v);
  };
  const auto n_entry = sections.contains("dimensions") && sections["dimensions"].contains("n");
  if (!n_entry) throw ValidationError("[dimensions] must define n");
  const int n = dim("n", 1);
  const int d = dim("d", 1);
  const int m = dim("m", 1);
  if (n < 1 || d < 1) throw ValidationError("[dimensions] needs n >= 1 and d >= 1");

  ProblemSpec s = ProblemSpec::zeros(n, d, m);
  const auto all = s.all_names();
  const auto sc = s.state_control_names();

  std::vector<std::vector<bool>> g_given(d, std::vector<bool>(d, false));
  std::vector<std::vector<bool>> h_given(d, std::vector<bool>(d, false));
  if (sections.contains("dynamics")) {
    for (const auto& [key, e] : sections["dynamics"]) {
      auto bad = [&] { fail(e.line, "unknown key '" + key + "' in [dynamics]"); };
      auto in_range = [&](const std::vector<int>& ix, const std::vector<int>& hi) {
        for (std::size_t k = 0; k < ix.size(); ++k) {
          if (ix[k] < 1 || ix[k] > hi[k]) fail(e.line, "index out of range in '" + key + "'");
        }
      };
      if (key.rfind("b_", 0) == 0) {
        const auto ix = indices(key.substr(2), 1);
        if (!ix) bad();
        in_range(*ix, {n});
        s.b[(*ix)[0] - 1] = to_expression(e, sc);
      } else if (key.rfind("sigma_", 0) == 0) {
        const auto ix = indices(key.substr(6), 2);
        if (!ix) bad();
        in_range(*ix, {n, d});
        s.sigma[(*ix)[0] - 1][(*ix)[1] - 1] = to_expression(e, sc);
      } else if (key.rfind("h_", 0) == 0) {
        const auto ix = indices(key.substr(2), 3);
        if (!ix) bad();
        in_range(*ix, {d, d, n});
        s.h[(*ix)[0] - 1][(*ix)[1] - 1][(*ix)[2] - 1] = to_expression(e, sc);
        h_given[(*ix)[0] - 1][(*ix)[1] - 1] = true;
      } else {
        bad();
      }
    }
    sections.erase("dynamics");
  }
  symmetrise(s.h, h_given);

  const auto f = take("cost", "f");
  const auto psi = take("cost", "psi");
  const auto lambda = take("cost", "lambda");
  if (sections.contains("cost")) {
    for (auto it = sections["cost"].begin(); it != sections["cost"].end();) {
      const auto& [key, e] = *it;
      if (key.rfind("g_", 0) != 0) fail(e.line, "unknown key '" + key + "' in [cost]");
      const auto ix = indices(key.substr(2), 2);
      if (!ix || (*ix)[0] < 1 || (*ix)[0] > d || (*ix)[1] < 1 || (*ix)[1] > d) {
        fail(e.line, "bad index in '" + key + "'");
      }
      s.g[(*ix)[0] - 1][(*ix)[1] - 1] = to_expression(e, all);
      g_given[(*ix)[0] - 1][(*ix)[1] - 1] = true;
      it = sections["cost"].erase(it);
    }
  }
  symmetrise(s.g, g_given);
  if (f && psi) fail(psi->line, "f and psi are mutually exclusive");
  if (f) {
    if (lambda) fail(lambda->line, "lambda belongs to the psi shorthand");
    if (lambda_override) throw ValidationError("--lambda needs a problem using the psi shorthand");
    s.f = to_expression(*f, all);
  } else if (psi) {
    if (!lambda && !lambda_override) fail(psi->line, "psi needs lambda");
    const double lam = lambda_override ? *lambda_override : to_double(*lambda);
    if (!(lam > 0.0)) throw ValidationError("lambda must be positive");
    s.psi = to_expression(*psi, sc);
    s.lambda = lam;
    s.f = discounted_running_cost(lam, *s.psi);
  } else {
    if (lambda) fail(lambda->line, "lambda belongs to the psi shorthand");
    if (lambda_override) throw ValidationError("--lambda needs a problem using the psi shorthand");
  }

  if (const auto e = take("uncertainty", "sigma_lo2")) s.gamma.sigma_lo2 = to_double(*e);
  if (const auto e = take("uncertainty", "sigma_hi2")) s.gamma.sigma_hi2 = to_double(*e);
  if (sections.contains("uncertainty")) {
    std::map<int, Eigen::MatrixXd> qs;
    for (const auto& [key, e] : sections["uncertainty"]) {
      const auto ix = key.size() > 1 && key[0] == 'q' ? indices(key.substr(1 + (key[1] == '_')), 1)
                                                       : std::nullopt;
      if (!ix) fail(e.line, "unknown key '" + key + "' in [uncertainty]");
      if (qs.contains((*ix)[0])) fail(e.line, "candidate " + std::to_string((*ix)[0]) + " repeated");
      qs[(*ix)[0]] = to_matrix(e, d);
    }
    if (!qs.empty()) {
      s.gamma.candidates.clear();
      for (auto& [k, q] : qs) s.gamma.candidates.push_back(q);
    }
    sections.erase("uncertainty");
  }

  if (const auto e = take("control", "lower")) s.controls.lower = to_list(*e);
  if (const auto e = take("control", "upper")) s.controls.upper = to_list(*e);
  if (const auto e = take("control", "points")) {
    const long long p = to_integer(*e);
    if (p < 1 || p > 100000) fail(e->line, "points out of range");
    s.controls.points_per_axis = static_cast<int>(p);
  }

  auto& sv = pf.solver;
  sv.lower.assign(n, -5.0);
  sv.upper.assign(n, 5.0);
  sv.counts.assign(n, 101);
  if (const auto e = take("solver", "lower")) sv.lower = to_list(*e);
  if (const auto e = take("solver", "upper")) sv.upper = to_list(*e);
  if (const auto e = take("solver", "counts")) {
    sv.counts.clear();
    for (double c : to_list(*e)) {
      if (c != std::floor(c) || c < 3 || c > 1e7) fail(e->line, "grid counts must be integers >= 3");
      sv.counts.push_back(static_cast<int>(c));
    }
  }
  if (const auto e = take("solver", "tol")) sv.tol = to_double(*e);
  if (const auto e = take("solver", "mu")) sv.mu = to_double(*e);
  if (const auto e = take("solver", "dt")) sv.dt = to_double(*e);
  if (const auto e = take("solver", "max_horizon")) sv.max_horizon = to_double(*e);
  if (sv.lower.size() != static_cast<std::size_t>(n) || sv.upper.size() != static_cast<std::size_t>(n) ||
      sv.counts.size() != static_cast<std::size_t>(n)) {
    throw ValidationError("[solver] lower, upper and counts need n entries");
  }
  if (!(sv.tol > 0.0)) throw ValidationError("[solver] tol must be positive");
  if (sv.dt && !(*sv.dt > 0.0)) throw ValidationError("[solver] dt must be positive");
  s.mu = sv.mu;

  auto& mc = pf.mc;
  mc.x0.assign(1, std::vector<double>(n, 0.0));
  if (const auto e = take("mc", "dt")) mc.dt = to_double(*e);
  if (const auto e = take("mc", "T_cut")) mc.T_cut = to_double(*e);
  if (const auto e = take("mc", "T")) mc.T = to_double(*e);
  if (const auto e = take("mc", "n_paths")) {
    const long long p = to_integer(*e);
    if (p < 1) fail(e->line, "n_paths must be positive");
    mc.n_paths = static_cast<std::size_t>(p);
  }
  if (const auto e = take("mc", "seed")) {
    const long long v = to_integer(*e);
    if (v < 0) fail(e->line, "seed must be non-negative");
    mc.seed = static_cast<std::uint64_t>(v);
  }
  if (const auto e = take("mc", "x0")) {
    mc.x0.clear();
    for (const auto& point : split(e->value, ';')) {
      mc.x0.push_back(to_list({point, e->line}));
      if (mc.x0.back().size() != static_cast<std::size_t>(n)) fail(e->line, "x0 points need n coordinates");
    }
  }
  if (const auto e = take("mc", "family")) {
    for (const auto& tok : split(e->value, ',')) {
      if (tok.empty()) fail(e->line, "empty scenario name");
      mc.family.push_back(tok);
    }
  }
  if (const auto e = take("mc", "control")) {
    if (e->value != "feedback") mc.control = to_list(*e);
  }
  if (!(mc.dt > 0.0) || !(mc.T_cut > 0.0) || (mc.T && !(*mc.T > 0.0))) {
    throw ValidationError("[mc] dt, T and T_cut must be positive");
  }

  for (const auto& [name, sec] : sections) {
    if (!sec.empty()) {
      const auto& [key, e] = *sec.begin();
      fail(e.line, "unknown key '" + key + "' in [" + name + "]");
    }
  }
  s.validate();
  pf.spec = std::move(s);
  return pf;
}

ProblemFile load_problem(const std::string& path, std::optional<double> lambda) {
  if (path == "example57") return example57_file(lambda.value_or(1.0));
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read problem file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw ValidationError("cannot read problem file '" + path + "'");
  try {
    return parse_problem(buf.str(), lambda);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

namespace {

struct Context {
  ProblemFile pf;
  fs::path out_dir;
  int threads = 1;
  std::optional<std::string> value_path;
  std::optional<std::vector<double>> control;
};

json to_json(const std::vector<double>& v) { return json(v); }

json to_json(const McEstimate& e) {
  return {{"mean", e.mean}, {"std_error", e.std_error}, {"n_paths", e.n_paths}};
}

std::ofstream open_output(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw ValidationError("cannot write '" + p.string() + "'");
  return out;
}

void write_json(const fs::path& p, const json& j) {
  auto out = open_output(p);
  out << j.dump(2) << '\n';
}

Grid solver_grid(const ProblemFile& pf) {
  std::vector<std::pair<double, double>> bounds;
  for (std::size_t k = 0; k < pf.solver.lower.size(); ++k) bounds.emplace_back(pf.solver.lower[k], pf.solver.upper[k]);
  return build_grid(bounds, pf.solver.counts);
}

SolveOptions solver_options(const Context& ctx) {
  SolveOptions o;
  o.dt = ctx.pf.solver.dt;
  o.mu = ctx.pf.solver.mu;
  o.max_horizon = ctx.pf.solver.max_horizon;
  o.threads = ctx.threads;
  return o;
}

SolveResult solve(const Context& ctx) {
  return solve_elliptic(ctx.pf.spec, solver_grid(ctx.pf), ctx.pf.solver.tol, std::nullopt, solver_options(ctx));
}

json report_json(const SolveReport& r) {
  return {{"converged", r.converged},
          {"iterations", r.iterations},
          {"dt", r.dt},
          {"horizon", r.horizon},
          {"mu", r.mu},
          {"fitted_rate", r.fitted_rate},
          {"residual_norm", r.residual_norm},
          {"growth_ratio", r.growth_ratio},
          {"growth_ok", r.growth_ok},
          {"history_monotone", r.history_monotone},
          {"change_history", r.change_history},
          {"diagnostics", r.diagnostics}};
}

// Value field from --value, else a fresh solve.
ValueField field_for(const Context& ctx) {
  if (ctx.value_path) {
    std::ifstream in(*ctx.value_path);
    if (!in) throw ValidationError("cannot read value file '" + *ctx.value_path + "'");
    ValueField f = read_value_csv(in, ctx.pf.spec.controls);
    if (f.grid.dimension() != ctx.pf.spec.n) throw ValidationError("value file has the wrong state dimension");
    return f;
  }
  auto r = solve(ctx);
  if (!r.report.converged) throw SchemeError("solve did not converge: " + r.report.diagnostics);
  return std::move(r.field);
}

ControlPolicy control_for(const Context& ctx, std::optional<ValueField>& field) {
  const auto& u = ctx.control ? ctx.control : ctx.pf.mc.control;
  if (u) return ControlPolicy::constant(*u);
  if (!field) field = field_for(ctx);
  return ControlPolicy::feedback(*field, ctx.pf.spec.controls);
}

std::vector<VolatilityPolicy> family_for(const Context& ctx, std::optional<ValueField>& field) {
  const auto& gamma = ctx.pf.spec.gamma;
  const int d = ctx.pf.spec.d;
  std::vector<VolatilityPolicy> family;
  if (ctx.pf.mc.family.empty()) {
    for (const auto& q : gamma.extreme_points()) family.push_back(VolatilityPolicy::constant(q));
    return family;
  }
  for (const auto& tok : ctx.pf.mc.family) {
    if (tok == "lo" || tok == "hi") {
      if (d != 1) throw ValidationError("scenario '" + tok + "' needs d = 1; use q<k>");
      family.push_back(VolatilityPolicy::constant(
          Eigen::MatrixXd::Constant(1, 1, tok == "lo" ? gamma.sigma_lo2 : gamma.sigma_hi2)));
    } else if (tok == "feedback") {
      if (!field) field = field_for(ctx);
      family.push_back(VolatilityPolicy::feedback(*field));
    } else if (tok.size() > 1 && tok[0] == 'q' && tok.find_first_not_of("0123456789", 1) == std::string::npos) {
      const std::size_t k = std::stoul(tok.substr(1));
      if (k < 1 || k > gamma.candidates.size()) throw ValidationError("no candidate matrix " + tok);
      family.push_back(VolatilityPolicy::constant(gamma.candidates[k - 1]));
    } else {
      throw ValidationError("unknown scenario '" + tok + "'");
    }
  }
  return family;
}

int cmd_solve(const Context& ctx) {
  const auto r = solve(ctx);
  {
    auto out = open_output(ctx.out_dir / "value.csv");
    write_value_csv(out, r.field, ctx.pf.spec.controls);
  }
  json j = report_json(r.report);
  j["nodes"] = r.field.grid.size();
  j["interior_nodes"] = r.field.grid.interior_nodes().size();
  write_json(ctx.out_dir / "solve_report.json", j);
  if (!r.report.converged) {
    std::cerr << "solve: not converged: " << r.report.diagnostics << '\n';
    return 3;
  }
  return 0;
}

int cmd_simulate(const Context& ctx, std::size_t n_paths, std::optional<double> horizon) {
  std::optional<ValueField> field;
  const auto ctrl = control_for(ctx, field);
  const auto family = family_for(ctx, field);
  const auto& mc = ctx.pf.mc;
  const double T = horizon ? *horizon : mc.T.value_or(mc.T_cut);
  SimulationOptions opt;
  opt.threads = ctx.threads;
  json runs = json::array();
  for (std::size_t p = 0; p < mc.x0.size(); ++p) {
    for (std::size_t s = 0; s < family.size(); ++s) {
      const auto b = simulate_gsde(ctx.pf.spec, mc.x0[p], ctrl, family[s], mc.dt, T, n_paths, mc.seed, opt);
      const std::string name = "paths_" + std::to_string(p) + "_" + std::to_string(s) + ".csv";
      {
        auto out = open_output(ctx.out_dir / name);
        write_paths_csv(out, b);
      }
      json terminal = json::array();
      for (int k = 0; k < ctx.pf.spec.n; ++k) {
        terminal.push_back(to_json(terminal_estimate(b, [k](std::span<const double> x) { return x[k]; })));
      }
      runs.push_back({{"x0", to_json(mc.x0[p])},
                      {"scenario", b.scenario},
                      {"file", name},
                      {"steps", b.steps},
                      {"flagged", b.flagged_count},
                      {"terminal", terminal}});
    }
  }
  json j{{"control", ctrl.name()}, {"dt", mc.dt}, {"T", T}, {"n_paths", n_paths}, {"seed", mc.seed},
         {"runs", runs}};
  write_json(ctx.out_dir / "simulate_summary.json", j);
  return 0;
}

int cmd_cost(const Context& ctx, std::size_t n_paths) {
  std::optional<ValueField> field;
  const auto ctrl = control_for(ctx, field);
  const auto family = family_for(ctx, field);
  const auto& mc = ctx.pf.mc;
  SimulationOptions opt;
  opt.threads = ctx.threads;
  json points = json::array();
  for (const auto& x0 : mc.x0) {
    const auto c = discounted_cost(ctx.pf.spec, x0, ctrl, family, mc.dt, mc.T_cut, n_paths, mc.seed, opt);
    json scen = json::array();
    for (const auto& s : c.scenarios) {
      scen.push_back({{"scenario", s.scenario}, {"estimate", to_json(s.estimate)},
                      {"max_abs_state", s.max_abs_state}});
    }
    points.push_back({{"x0", to_json(x0)},
                      {"value", c.robust.value},
                      {"std_error", c.robust.std_error},
                      {"scenario", c.scenarios[c.robust.index].scenario},
                      {"tail_bound", c.tail_bound},
                      {"flagged", c.flagged},
                      {"scenarios", scen}});
  }
  json j{{"control", ctrl.name()}, {"lambda", ctx.pf.spec.lambda.value_or(0.0)}, {"dt", mc.dt},
         {"T_cut", mc.T_cut}, {"n_paths", n_paths}, {"seed", mc.seed}, {"points", points}};
  write_json(ctx.out_dir / "cost_summary.json", j);
  return 0;
}

int cmd_verify(const Context& ctx, std::optional<double> tol) {
  std::optional<ValueField> field = field_for(ctx);
  const auto ctrl = control_for(ctx, field);
  const auto r = verify_control_residual(ctx.pf.spec, *field, ctrl, tol.value_or(5.0 * ctx.pf.solver.tol));
  {
    auto out = open_output(ctx.out_dir / "residual.csv");
    for (int k = 0; k < ctx.pf.spec.n; ++k) out << 'x' << k + 1 << ',';
    out << "residual\n";
    const auto& interior = field->grid.interior_nodes();
    for (std::size_t i = 0; i < interior.size(); ++i) {
      for (double x : field->grid.point(interior[i])) out << format_double(x) << ',';
      out << format_double(r.pointwise[i]) << '\n';
    }
  }
  json j{{"control", ctrl.name()}, {"derivatives", r.derivatives}, {"nodes", r.nodes},
         {"sup", r.sup},         {"mean", r.mean},               {"worst_x", to_json(r.worst_x)},
         {"tolerance", r.tolerance}, {"pass", r.pass}};
  write_json(ctx.out_dir / "verification_report.json", j);
  return 0;
}

int cmd_check(const Context& ctx, int samples) {
  SampleBox box;
  box.x_lower = ctx.pf.solver.lower;
  box.x_upper = ctx.pf.solver.upper;
  const auto r = check_assumptions(ctx.pf.spec, box, samples, ctx.pf.mc.seed);
  json verdicts = json::array();
  for (const auto& v : r.verdicts) {
    verdicts.push_back({{"name", v.name}, {"pass", v.pass}, {"measured", v.measured},
                        {"witness", to_json(v.witness)}, {"note", v.note}});
  }
  json j{{"L", r.L},           {"alpha1", r.alpha1},           {"alpha2", r.alpha2},
         {"mu_hat", r.mu_hat}, {"eta_hat", r.eta_hat},         {"eta_bar_hat", r.eta_bar_hat},
         {"sigma_hi2", r.sigma_hi2}, {"samples", r.samples}, {"seed", ctx.pf.mc.seed},
         {"verdicts", verdicts}};
  write_json(ctx.out_dir / "assumption_report.json", j);
  return 0;
}

int cmd_dpp(const Context& ctx, double s) {
  const ValueField field = field_for(ctx);
  const double r = dpp_residual(ctx.pf.spec, field, s, ctx.pf.solver.dt, ctx.threads);
  json j{{"s", s}, {"residual", r}, {"tolerance", ctx.pf.solver.tol}, {"ratio", r / ctx.pf.solver.tol}};
  write_json(ctx.out_dir / "dpp_report.json", j);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Robust stochastic control under volatility uncertainty", "robustctl"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string problem;
  std::optional<double> lambda;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  if (const char* env = std::getenv("ROBUSTCTL_OUT_DIR")) out_dir = env;
  if (out_dir.empty()) out_dir = ".";
  int threads = 1;
  std::optional<std::string> value_path;
  std::optional<std::vector<double>> control;

  app.add_option("--problem", problem, "Problem file, or the builtin 'example57'")->required();
  app.add_option("--lambda", lambda, "Discount rate for the psi shorthand");
  app.add_option("--seed", seed, "Random seed (overrides [mc] seed)");
  app.add_option("--out-dir", out_dir, "Output directory");
  app.add_option("--threads", threads, "Worker threads")->check(CLI::Range(1, 1024));

  auto* solve_cmd = app.add_subcommand("solve", "Solve the elliptic equation; writes value.csv and solve_report.json");
  auto* sim_cmd = app.add_subcommand("simulate", "Simulate paths; writes paths_*.csv and simulate_summary.json");
  auto* cost_cmd = app.add_subcommand("cost", "Monte Carlo discounted cost; writes cost_summary.json");
  auto* verify_cmd = app.add_subcommand("verify", "Pointwise residual of a control; writes verification_report.json");
  auto* check_cmd = app.add_subcommand("check", "Sampled structural constants; writes assumption_report.json");
  auto* dpp_cmd = app.add_subcommand("dpp", "Dynamic programming residual; writes dpp_report.json");
  (void)solve_cmd;

  std::optional<std::size_t> sim_paths, cost_paths;
  std::optional<double> horizon, tol;
  int samples = 2000;
  double s = 0.1;
  for (auto* c : {sim_cmd, cost_cmd, verify_cmd, dpp_cmd}) {
    c->add_option("--value", value_path, "Value CSV from solve (default: solve first)");
  }
  for (auto* c : {sim_cmd, cost_cmd, verify_cmd}) {
    c->add_option("--control", control, "Constant control (comma separated)")->delimiter(',');
  }
  sim_cmd->add_option("--n-paths", sim_paths, "Number of paths (default 100)");
  sim_cmd->add_option("--T", horizon, "Horizon (default [mc] T or T_cut)");
  cost_cmd->add_option("--n-paths", cost_paths, "Number of paths (default [mc] n_paths)");
  verify_cmd->add_option("--tol", tol, "Residual tolerance (default 5 x solver tol)");
  check_cmd->add_option("--samples", samples, "Sample pairs")->check(CLI::Range(2, 100000000));
  dpp_cmd->add_option("--s", s, "Window length")->check(CLI::PositiveNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    Context ctx;
    ctx.pf = load_problem(problem, lambda);
    if (seed) ctx.pf.mc.seed = *seed;
    ctx.threads = threads;
    ctx.value_path = value_path;
    ctx.control = control;
    ctx.out_dir = out_dir;
    std::error_code ec;
    fs::create_directories(ctx.out_dir, ec);
    if (ec) throw ValidationError("cannot create output directory '" + out_dir + "': " + ec.message());

    const auto start = std::chrono::steady_clock::now();
    int code = 0;
    if (*solve_cmd) code = cmd_solve(ctx);
    else if (*sim_cmd) code = cmd_simulate(ctx, sim_paths.value_or(100), horizon);
    else if (*cost_cmd) code = cmd_cost(ctx, cost_paths.value_or(ctx.pf.mc.n_paths));
    else if (*verify_cmd) code = cmd_verify(ctx, tol);
    else if (*check_cmd) code = cmd_check(ctx, samples);
    else code = cmd_dpp(ctx, s);
    const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
    std::cerr << app.get_subcommands().front()->get_name() << ": done in " << took.count() << " s\n";
    return code;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ExpressionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace rctl
