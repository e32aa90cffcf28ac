#include "robustctl/problem.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace rctl {

// ---------------------------------------------------------------- ControlSet

void ControlSet::validate() const {
  if (lower.size() != upper.size()) throw ValidationError("control bounds differ in length");
  if (points_per_axis < 1) throw ValidationError("control lattice needs at least one point per axis");
  for (std::size_t j = 0; j < lower.size(); ++j) {
    if (!std::isfinite(lower[j]) || !std::isfinite(upper[j]) || lower[j] > upper[j]) {
      throw ValidationError("control bounds must be finite with lower <= upper (axis " +
                            std::to_string(j + 1) + ")");
    }
  }
}

std::size_t ControlSet::lattice_size() const {
  std::size_t total = 1;
  for (std::size_t j = 0; j < lower.size(); ++j) total *= static_cast<std::size_t>(points_per_axis);
  return total;
}

std::vector<double> ControlSet::lattice_point(std::size_t index) const {
  const std::size_t m = lower.size();
  const auto k = static_cast<std::size_t>(points_per_axis);
  std::vector<double> u(m);
  for (std::size_t j = m; j-- > 0;) {
    std::size_t i = index % k;
    index /= k;
    if (k == 1 || lower[j] == upper[j]) {
      u[j] = lower[j];
    } else if (i + 1 == k) {
      u[j] = upper[j];
    } else {
      u[j] = lower[j] + static_cast<double>(i) * (upper[j] - lower[j]) / static_cast<double>(k - 1);
    }
  }
  return u;
}

std::vector<std::vector<double>> ControlSet::lattice() const {
  std::vector<std::vector<double>> out;
  out.reserve(lattice_size());
  for (std::size_t i = 0; i < lattice_size(); ++i) out.push_back(lattice_point(i));
  return out;
}

std::size_t ControlSet::nearest_index(const std::vector<double>& u) const {
  const auto k = static_cast<std::size_t>(points_per_axis);
  std::size_t index = 0;
  for (std::size_t j = 0; j < lower.size(); ++j) {
    std::size_t i = 0;
    if (k > 1 && upper[j] > lower[j]) {
      double t = (u[j] - lower[j]) / (upper[j] - lower[j]) * static_cast<double>(k - 1);
      t = std::clamp(std::round(t), 0.0, static_cast<double>(k - 1));
      i = static_cast<std::size_t>(t);
    }
    index = index * k + i;
  }
  return index;
}

bool ControlSet::contains(const std::vector<double>& u, double slack) const {
  if (u.size() != lower.size()) return false;
  for (std::size_t j = 0; j < u.size(); ++j) {
    if (u[j] < lower[j] - slack || u[j] > upper[j] + slack) return false;
  }
  return true;
}

// ------------------------------------------------------------ UncertaintySet

void UncertaintySet::validate() const {
  if (dimension < 1) throw ValidationError("uncertainty dimension must be positive");
  if (!(sigma_lo2 > 0.0) || !std::isfinite(sigma_lo2)) {
    throw ValidationError("sigma_lo2 must be positive (non-degenerate G)");
  }
  if (!(sigma_hi2 >= sigma_lo2) || !std::isfinite(sigma_hi2)) {
    throw ValidationError("sigma_hi2 must be finite and >= sigma_lo2");
  }
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    if (!admits(candidates[c], 1e-10)) {
      throw ValidationError("candidate Q #" + std::to_string(c + 1) +
                            " is not a symmetric matrix within [sigma_lo2 I, sigma_hi2 I]");
    }
  }
}

bool UncertaintySet::admits(const Eigen::MatrixXd& q, double slack) const {
  if (q.rows() != dimension || q.cols() != dimension) return false;
  double scale = std::max(1.0, q.cwiseAbs().maxCoeff());
  if ((q - q.transpose()).cwiseAbs().maxCoeff() > slack * scale) return false;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(q, Eigen::EigenvaluesOnly);
  const auto& ev = eig.eigenvalues();
  double tol = slack * std::max(1.0, sigma_hi2);
  return ev.minCoeff() >= sigma_lo2 - tol && ev.maxCoeff() <= sigma_hi2 + tol;
}

std::vector<Eigen::MatrixXd> UncertaintySet::extreme_points() const {
  if (dimension == 1) {
    std::vector<Eigen::MatrixXd> out{Eigen::MatrixXd::Constant(1, 1, sigma_lo2)};
    if (sigma_hi2 != sigma_lo2) out.push_back(Eigen::MatrixXd::Constant(1, 1, sigma_hi2));
    return out;
  }
  return candidates;
}

double g_of(const UncertaintySet& gamma, const Eigen::MatrixXd& a) {
  if (a.rows() != gamma.dimension || a.cols() != gamma.dimension) {
    throw ValidationError("G: matrix is " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + ", expected dimension " +
                          std::to_string(gamma.dimension));
  }
  if (gamma.dimension == 1) {
    double v = a(0, 0);
    return v >= 0.0 ? 0.5 * gamma.sigma_hi2 * v : 0.5 * gamma.sigma_lo2 * v;
  }
  if (gamma.candidates.empty()) throw ValidationError("G: empty candidate list for d >= 2");
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& q : gamma.candidates) best = std::max(best, (a.cwiseProduct(q)).sum());
  return 0.5 * best;
}

// --------------------------------------------------------------- ProblemSpec

std::vector<std::string> state_names(int n) {
  std::vector<std::string> out;
  for (int i = 1; i <= n; ++i) out.push_back("x" + std::to_string(i));
  return out;
}

std::vector<std::string> control_names(int m) {
  std::vector<std::string> out;
  for (int i = 1; i <= m; ++i) out.push_back("u" + std::to_string(i));
  return out;
}

std::vector<std::string> z_names(int d) {
  std::vector<std::string> out;
  for (int i = 1; i <= d; ++i) out.push_back("z" + std::to_string(i));
  return out;
}

std::vector<std::string> ProblemSpec::state_control_names() const {
  auto out = state_names(n);
  for (auto& s : control_names(m)) out.push_back(std::move(s));
  return out;
}

std::vector<std::string> ProblemSpec::all_names() const {
  auto out = state_control_names();
  out.push_back("y");
  for (auto& s : z_names(d)) out.push_back(std::move(s));
  return out;
}

Expression discounted_running_cost(double lambda, const Expression& psi) {
  return Expression::binary(
      BinaryOp::Add, Expression::binary(BinaryOp::Mul, Expression::constant(-lambda), Expression::variable("y")),
      psi);
}

ProblemSpec ProblemSpec::zeros(int n, int d, int m) {
  ProblemSpec s;
  s.n = n;
  s.d = d;
  s.m = m;
  s.b.assign(n, Expression());
  s.h.assign(d, std::vector<std::vector<Expression>>(d, std::vector<Expression>(n)));
  s.sigma.assign(n, std::vector<Expression>(d));
  s.g.assign(d, std::vector<Expression>(d));
  s.controls.lower.assign(m, 0.0);
  s.controls.upper.assign(m, 1.0);
  s.gamma.dimension = d;
  s.gamma.sigma_lo2 = 1.0;
  s.gamma.sigma_hi2 = 1.0;
  if (d > 1) s.gamma.candidates.push_back(Eigen::MatrixXd::Identity(d, d));
  return s;
}

namespace {

void require_vars(const Expression& e, const std::set<std::string>& allowed, const std::string& what) {
  for (const auto& v : e.variables()) {
    if (!allowed.contains(v)) throw ValidationError(what + " uses undeclared variable '" + v + "'");
  }
}

}  // namespace

void ProblemSpec::validate() const {
  if (n < 1 || d < 1 || m < 0) throw ValidationError("dimensions must satisfy n >= 1, d >= 1, m >= 0");
  auto un = static_cast<std::size_t>(n);
  auto ud = static_cast<std::size_t>(d);
  if (b.size() != un) throw ValidationError("b must have n entries");
  if (sigma.size() != un) throw ValidationError("sigma must have n rows");
  for (const auto& row : sigma) {
    if (row.size() != ud) throw ValidationError("sigma must have d columns");
  }
  if (h.size() != ud || g.size() != ud) throw ValidationError("h and g must be d x d");
  for (std::size_t i = 0; i < ud; ++i) {
    if (h[i].size() != ud || g[i].size() != ud) throw ValidationError("h and g must be d x d");
    for (std::size_t j = 0; j < ud; ++j) {
      if (h[i][j].size() != un) throw ValidationError("each h_ij must have n entries");
    }
  }
  controls.validate();
  if (controls.dimension() != static_cast<std::size_t>(m)) {
    throw ValidationError("control bounds must have m entries");
  }
  if (gamma.dimension != d) throw ValidationError("uncertainty set dimension must equal d");
  gamma.validate();
  if (d > 1 && gamma.candidates.empty()) {
    throw ValidationError("d >= 2 needs at least one candidate Q");
  }
  if (mu && !(*mu > 0.0)) throw ValidationError("mu must be positive");
  if (lambda && !(*lambda > 0.0)) throw ValidationError("lambda must be positive");

  auto sc = state_control_names();
  std::set<std::string> sc_set(sc.begin(), sc.end());
  auto all = all_names();
  std::set<std::string> all_set(all.begin(), all.end());
  for (std::size_t i = 0; i < un; ++i) {
    require_vars(b[i], sc_set, "b_" + std::to_string(i + 1));
    for (std::size_t k = 0; k < ud; ++k) {
      require_vars(sigma[i][k], sc_set, "sigma_" + std::to_string(i + 1) + std::to_string(k + 1));
    }
  }
  for (std::size_t i = 0; i < ud; ++i) {
    for (std::size_t j = 0; j < ud; ++j) {
      std::string ij = std::to_string(i + 1) + std::to_string(j + 1);
      for (std::size_t k = 0; k < un; ++k) require_vars(h[i][j][k], sc_set, "h_" + ij);
      require_vars(g[i][j], all_set, "g_" + ij);
      if (j > i) {
        if (!(g[i][j] == g[j][i])) throw ValidationError("g_" + ij + " and its transpose differ");
        for (std::size_t k = 0; k < un; ++k) {
          if (!(h[i][j][k] == h[j][i][k])) throw ValidationError("h_" + ij + " and its transpose differ");
        }
      }
    }
  }
  require_vars(f, all_set, "f");
  if (psi) require_vars(*psi, sc_set, "psi");
}

// ----------------------------------------------------------- CompiledProblem

CompiledProblem::CompiledProblem(const ProblemSpec& spec) : spec_(spec) {
  spec_.validate();
  auto names = spec_.all_names();
  slots_ = names.size();
  for (int i = 0; i < spec_.n; ++i) b_.emplace_back(spec_.b[i], names);
  for (int i = 0; i < spec_.d; ++i) {
    for (int j = 0; j < spec_.d; ++j) {
      for (int k = 0; k < spec_.n; ++k) {
        h_.emplace_back(spec_.h[i][j][k], names);
        has_h_ = has_h_ || !spec_.h[i][j][k].is_zero();
      }
      g_.emplace_back(spec_.g[i][j], names);
      has_g_ = has_g_ || !spec_.g[i][j].is_zero();
    }
  }
  for (int i = 0; i < spec_.n; ++i) {
    for (int k = 0; k < spec_.d; ++k) sigma_.emplace_back(spec_.sigma[i][k], names);
  }
  f_ = CompiledExpression(spec_.f, names);
}

void CompiledProblem::fill(std::span<double> slots, std::span<const double> x,
                           std::span<const double> u, double y, std::span<const double> z) const {
  for (int i = 0; i < spec_.n; ++i) slots[x_slot(i)] = x[i];
  for (int j = 0; j < spec_.m; ++j) slots[u_slot(j)] = u[j];
  slots[y_slot()] = y;
  for (int k = 0; k < spec_.d; ++k) slots[z_slot(k)] = z.empty() ? 0.0 : z[k];
}

// ------------------------------------------------------- check_assumptions

const AssumptionVerdict& AssumptionReport::verdict(const std::string& name) const {
  for (const auto& v : verdicts) {
    if (v.name == name) return v;
  }
  throw std::out_of_range("no verdict named " + name);
}

namespace {

double norm(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double norm(const std::vector<double>& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

struct Sampler {
  std::mt19937_64 rng;
  double uniform(double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  std::vector<double> box(const std::vector<double>& lo, const std::vector<double>& hi) {
    std::vector<double> v(lo.size());
    for (std::size_t i = 0; i < lo.size(); ++i) v[i] = uniform(lo[i], hi[i]);
    return v;
  }
};

class Evaluator {
 public:
  explicit Evaluator(const CompiledProblem& cp) : cp_(cp), slots_(cp.slot_count()) {}

  void set(const std::vector<double>& x, const std::vector<double>& u, double y = 0.0,
           const std::vector<double>& z = {}) {
    cp_.fill(slots_, x, u, y, z);
  }

  std::vector<double> b() const {
    std::vector<double> out(cp_.spec().n);
    for (int i = 0; i < cp_.spec().n; ++i) out[i] = cp_.b(i)(slots_);
    return out;
  }
  Eigen::MatrixXd sigma() const {
    const auto& s = cp_.spec();
    Eigen::MatrixXd out(s.n, s.d);
    for (int i = 0; i < s.n; ++i) {
      for (int k = 0; k < s.d; ++k) out(i, k) = cp_.sigma(i, k)(slots_);
    }
    return out;
  }
  std::vector<double> h(int i, int j) const {
    std::vector<double> out(cp_.spec().n);
    for (int k = 0; k < cp_.spec().n; ++k) out[k] = cp_.h(i, j, k)(slots_);
    return out;
  }
  double f() const { return cp_.f()(slots_); }
  Eigen::MatrixXd g() const {
    const int d = cp_.spec().d;
    Eigen::MatrixXd out(d, d);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) out(i, j) = cp_.g(i, j)(slots_);
    }
    return out;
  }

 private:
  const CompiledProblem& cp_;
  std::vector<double> slots_;
};

std::vector<double> concat(std::initializer_list<std::vector<double>> parts) {
  std::vector<double> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace

AssumptionReport check_assumptions(const ProblemSpec& spec, const SampleBox& box, int n_samples,
                                   std::uint64_t rng_seed) {
  CompiledProblem cp(spec);
  if (n_samples < 2) throw ValidationError("check_assumptions needs at least 2 samples");
  if (box.x_lower.size() != static_cast<std::size_t>(spec.n) || box.x_upper.size() != box.x_lower.size()) {
    throw ValidationError("sample box must have n state bounds");
  }
  for (int i = 0; i < spec.n; ++i) {
    if (!(box.x_upper[i] > box.x_lower[i])) throw ValidationError("sample box is degenerate");
  }
  const auto u_lo = box.u_lower.value_or(spec.controls.lower);
  const auto u_hi = box.u_upper.value_or(spec.controls.upper);
  if (u_lo.size() != static_cast<std::size_t>(spec.m) || u_hi.size() != u_lo.size()) {
    throw ValidationError("sample box must have m control bounds");
  }

  Sampler rng{std::mt19937_64(rng_seed)};
  Evaluator ea(cp), eb(cp);
  const int d = spec.d;

  double L_bh = 0.0, L_su = 0.0, L_f = 0.0, alpha1 = 0.0, alpha2 = 0.0;
  double mu_hat = std::numeric_limits<double>::infinity();
  double eta_hat = std::numeric_limits<double>::infinity();
  std::vector<double> mu_witness, eta_witness, L_witness;

  auto g_sum_diff = [&](const Eigen::MatrixXd& ga, const Eigen::MatrixXd& gb) {
    return (ga - gb).cwiseAbs().sum();
  };

  try {
    for (int s = 0; s < n_samples; ++s) {
      auto x = rng.box(box.x_lower, box.x_upper);
      auto x2 = rng.box(box.x_lower, box.x_upper);
      auto u = rng.box(u_lo, u_hi);
      auto u2 = rng.box(u_lo, u_hi);
      double y = rng.uniform(box.y_lower, box.y_upper);
      double y2 = rng.uniform(box.y_lower, box.y_upper);
      std::vector<double> z(d), z2(d);
      for (int k = 0; k < d; ++k) {
        z[k] = rng.uniform(box.z_lower, box.z_upper);
        z2[k] = rng.uniform(box.z_lower, box.z_upper);
      }
      const double dx = norm(x, x2);
      const double du = norm(u, u2);

      // b/h Lipschitz in (x, u).
      ea.set(x, u);
      eb.set(x2, u2);
      if (dx + du > 0.0) {
        double num = norm(ea.b(), eb.b());
        for (int i = 0; i < d; ++i) {
          for (int j = 0; j < d; ++j) num += norm(ea.h(i, j), eb.h(i, j));
        }
        double q = num / (dx + du);
        if (q > L_bh) {
          L_bh = q;
          L_witness = concat({x, u, x2, u2});
        }
      }
      // sigma: alpha1 in x at fixed u, L in u at fixed x.
      const Eigen::MatrixXd sig_xu = ea.sigma();
      eb.set(x2, u);
      const Eigen::MatrixXd sig_x2u = eb.sigma();
      if (dx > 0.0) alpha1 = std::max(alpha1, (sig_xu - sig_x2u).norm() / dx);
      if (du > 0.0) {
        eb.set(x, u2);
        L_su = std::max(L_su, (sig_xu - eb.sigma()).norm() / du);
      }

      // B4 quotient at the pair (x, x2) with common u.
      if (dx > 0.0) {
        Eigen::MatrixXd ds = sig_xu - sig_x2u;
        Eigen::MatrixXd mat = ds.transpose() * ds;
        const std::vector<double> ba = ea.b();
        eb.set(x2, u);
        const std::vector<double> bb = eb.b();
        double drift = 0.0;
        for (int k = 0; k < spec.n; ++k) drift += (x[k] - x2[k]) * (ba[k] - bb[k]);
        for (int i = 0; i < d; ++i) {
          for (int j = 0; j < d; ++j) {
            auto ha = ea.h(i, j);
            auto hb = eb.h(i, j);
            double ip = 0.0;
            for (int k = 0; k < spec.n; ++k) ip += (x[k] - x2[k]) * (ha[k] - hb[k]);
            mat(i, j) += 2.0 * ip;
          }
        }
        mat += drift * Eigen::MatrixXd::Identity(d, d);
        double q = -g_of(spec.gamma, mat) / (dx * dx);
        if (q < eta_hat) {
          eta_hat = q;
          eta_witness = concat({x, u, x2});
        }
      }

      // f/g: alpha2 in z, L in (x, y, u), B3 quotient in y.
      ea.set(x, u, y, z);
      const double f_a = ea.f();
      const Eigen::MatrixXd g_a = ea.g();
      const double dz = norm(z, z2);
      if (dz > 0.0) {
        eb.set(x, u, y, z2);
        alpha2 = std::max(alpha2, (std::fabs(f_a - eb.f()) + g_sum_diff(g_a, eb.g())) / dz);
      }
      const double dy = std::fabs(y - y2);
      double denom = (1.0 + norm(x) + norm(x2)) * dx + dy + du;
      if (denom > 0.0) {
        eb.set(x2, u2, y2, z);
        L_f = std::max(L_f, (std::fabs(f_a - eb.f()) + g_sum_diff(g_a, eb.g())) / denom);
      }
      if (dy > 0.0) {
        eb.set(x, u, y2, z);
        double lhs = (f_a - eb.f()) * (y - y2) + 2.0 * g_of(spec.gamma, (g_a - eb.g()) * (y - y2));
        double q = -lhs / (dy * dy);
        if (q < mu_hat) {
          mu_hat = q;
          mu_witness = concat({x, u, {y}, z, {y2}});
        }
      }
    }
  } catch (const ExpressionError& e) {
    throw ExpressionError(e.kind(), std::string("assumption check: ") + e.what());
  }

  AssumptionReport r;
  r.samples = n_samples;
  r.L = std::max({L_bh, L_su, L_f});
  r.alpha1 = alpha1;
  r.alpha2 = alpha2;
  r.mu_hat = mu_hat;
  r.eta_hat = eta_hat;
  r.sigma_hi2 = spec.gamma.sigma_hi2;
  r.eta_bar_hat = r.eta_hat - (1.0 + r.sigma_hi2) * r.alpha1 * r.alpha2;

  int asym = 0;
  for (int i = 0; i < d; ++i) {
    for (int j = i + 1; j < d; ++j) {
      if (!(spec.g[i][j] == spec.g[j][i])) ++asym;
      for (int k = 0; k < spec.n; ++k) {
        if (!(spec.h[i][j][k] == spec.h[j][i][k])) ++asym;
      }
    }
  }
  r.verdicts.push_back({"B1", asym == 0, static_cast<double>(asym), {},
                        "structurally asymmetric (h, g) index pairs"});
  bool finite = std::isfinite(r.L) && std::isfinite(r.alpha1) && std::isfinite(r.alpha2);
  r.verdicts.push_back({"B2", finite, r.L, L_witness, "sampled Lipschitz constant L"});
  r.verdicts.push_back({"B3", r.mu_hat > 0.0, r.mu_hat, mu_witness, "mu_hat must be > 0"});
  r.verdicts.push_back({"B4", r.eta_hat > 0.0, r.eta_hat, eta_witness, "eta_hat must be > 0"});
  r.verdicts.push_back({"B5", r.eta_bar_hat > 0.0, r.eta_bar_hat, eta_witness,
                        "eta_bar_hat = eta_hat - (1 + sigma_hi2) alpha1 alpha2 must be > 0"});
  return r;
}

}  // namespace rctl
