#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "robustctl/grid.hpp"
#include "robustctl/parallel.hpp"
#include "robustctl/problem.hpp"

namespace rctl {

/// Numerical failure of the finite-difference scheme.
class SchemeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A requested time step exceeds the stability bound.
class CflError : public SchemeError {
 public:
  CflError(double requested, double admissible);
  double requested() const { return requested_; }
  double admissible() const { return admissible_; }

 private:
  double requested_;
  double admissible_;
};

/// Arguments (x, v, p, A, u) of the HJBI integrand. z = p sigma(x, u) is
/// always derived, never stored.
struct EvaluationPoint {
  std::vector<double> x;
  double v = 0.0;
  std::vector<double> p;
  Eigen::MatrixXd A;
  std::vector<double> u;

  std::vector<double> z(const CompiledProblem& cp) const;
};

struct HMatrix {
  Eigen::MatrixXd value;  // symmetrised
  double asymmetry = 0.0; // max |H - H^T| before averaging
  bool flagged() const { return asymmetry > 1e-12; }
};

/// H_ij = (sigma^T A sigma)_ij + 2 <p, h_ij> + 2 g_ij(x, v, p sigma, u).
HMatrix compute_H(const CompiledProblem& cp, const EvaluationPoint& pt);
HMatrix compute_H(const ProblemSpec& spec, const EvaluationPoint& pt);

/// G(H) + <p, b> + f(x, v, p sigma, u) at the control pt.u.
double hjbi_integrand(const CompiledProblem& cp, const EvaluationPoint& pt);

struct ResidualResult {
  double residual = 0.0;
  std::size_t control_index = 0;
  std::vector<double> control;
};

/// Minimum of the integrand over the control lattice (lowest index wins ties).
ResidualResult hjbi_residual_at(const CompiledProblem& cp, const std::vector<double>& x, double v,
                                const std::vector<double>& p, const Eigen::MatrixXd& A);
ResidualResult hjbi_residual_at(const ProblemSpec& spec, const std::vector<double>& x, double v,
                                const std::vector<double>& p, const Eigen::MatrixXd& A);

/// Monotone finite-difference discretisation of
///   inf_u [ G(H(x, v, Dv, D2v, u)) + <Dv, b> + f(x, v, Dv sigma, u) ]
/// on a grid.
///
/// For every control u and every extreme point Q of Gamma the operator is the
/// linear one with diffusion sigma Q sigma^T and drift b + sum Q_ij h_ij:
/// upwind first differences chosen by the drift sign, central second
/// differences and the 7-point cross stencil chosen by the sign of the
/// off-diagonal diffusion. The discrete integrand is the max over Q, then the
/// min over the control lattice. Boundary nodes use one-sided first
/// differences and no second differences along the boundary axis.
///
/// Coefficients that do not depend on (v, z) are tabulated at construction.
/// Running costs affine in y and free of z take a fast path.
class HjbiOperator {
 public:
  HjbiOperator(const ProblemSpec& spec, const Grid& grid, int threads = 1);
  ~HjbiOperator();
  HjbiOperator(const HjbiOperator&) = delete;
  HjbiOperator& operator=(const HjbiOperator&) = delete;

  const Grid& grid() const { return grid_; }
  const CompiledProblem& problem() const { return cp_; }

  /// 0.9 / max over nodes and controls of the explicit-step rate.
  double max_stable_dt(std::span<const double> values) const;

  /// Per-node minimum over the control lattice of the discrete integrand,
  /// with the minimising lattice index.
  void hamiltonian(std::span<const double> values, std::span<double> out,
                   std::span<std::size_t> argmin) const;

  /// out = values + dt * hamiltonian(values). No stability check.
  void step(std::span<const double> values, double dt, std::span<double> out,
            std::span<std::size_t> argmin) const;

  /// Discrete integrand at one node for an arbitrary control u.
  double integrand(std::size_t node, const std::vector<double>& u, std::span<const double> values) const;

  bool fast_path() const { return fast_; }

 private:
  struct Stencil;
  void build_tables();
  void fill_rows(const std::vector<double>& x, const std::vector<double>& u, double* rows, double* sigma,
                 double* rate, bool check_cross) const;
  Stencil stencil(std::size_t node, std::span<const double> values) const;
  std::pair<double, double> weights(std::size_t column, const Stencil& st) const;
  double row_value(const double* row, const Stencil& st) const;
  void sweep(std::span<const double> values, std::size_t begin, std::size_t end, double* out,
             std::size_t* argmin) const;

  CompiledProblem cp_;
  Grid grid_;
  int n_, d_;
  std::vector<std::vector<double>> lattice_;
  std::vector<Eigen::MatrixXd> scenarios_;
  std::size_t width_ = 0;
  bool fast_ = true;
  std::vector<CompiledExpression> f_parts_;  // intercept, slope (fast path)
  std::vector<CompiledExpression> g_parts_;  // per (i,j): intercept, slope (fast path)
  std::vector<std::pair<std::size_t, double>> constant_cols_;
  std::vector<std::size_t> control_cols_;
  std::vector<std::size_t> scenario_cols_;
  std::size_t node_block_ = 0;
  std::vector<double> packed_;  // per node: control columns (C each), then scenario columns (S blocks each), padded to a multiple of 8
  std::vector<double> sigma_;   // (node, control) -> sigma (n x d), general path only
  std::vector<double> rate_;    // (node, control) -> explicit-step rate without y-derivatives
  std::vector<unsigned> boundary_;
  double max_rate_ = 0.0;
  mutable WorkerPool pool_;
};

/// One explicit backward Euler step of the parabolic equation; refuses steps
/// above the stability bound.
ValueField parabolic_step(const ProblemSpec& spec, const ValueField& field, double dt);

/// Composition of round(s / dt) parabolic steps (s must be a multiple of dt).
ValueField backward_semigroup(const ProblemSpec& spec, double s, const ValueField& terminal, double dt,
                              int threads = 1);

struct SolveOptions {
  std::optional<double> dt;          // default: largest 1/k below the stability bound
  std::optional<double> mu;          // default: spec.mu, else the sampled mu_hat
  std::optional<double> max_horizon; // default: 40 / mu
  double growth_budget = 1e3;        // Cg in |V| <= Cg (1 + |x|^2)
  int threads = 1;
};

struct SolveReport {
  std::size_t iterations = 0;
  double dt = 0.0;
  double horizon = 0.0;
  double mu = 0.0;
  /// Sup-norm change on the interior subgrid over each unit-time window.
  std::vector<double> change_history;
  double fitted_rate = 0.0;
  double residual_norm = 0.0;
  double growth_ratio = 0.0;
  bool growth_ok = true;
  bool history_monotone = true;
  bool converged = false;
  std::string diagnostics;
};

struct SolveResult {
  ValueField field;
  SolveReport report;
};

/// Elliptic solution by running the parabolic flow backward from `initial`
/// (default 0) until the interior change over a unit-time window drops below tol.
SolveResult solve_elliptic(const ProblemSpec& spec, const Grid& grid, double tol,
                           const std::optional<ValueField>& initial = std::nullopt,
                           const SolveOptions& options = {});

/// Fields of the parabolic flow after each horizon in `horizons` (increasing,
/// multiples of the step), starting from `initial` (default 0).
std::vector<ValueField> horizon_snapshots(const ProblemSpec& spec, const Grid& grid,
                                          const std::vector<double>& horizons,
                                          const std::optional<ValueField>& initial = std::nullopt,
                                          const SolveOptions& options = {});

/// Largest step 1/k (k integer) not above the stability bound.
double default_dt(const HjbiOperator& op, std::span<const double> values);

std::vector<std::size_t> extract_policy(const ProblemSpec& spec, const ValueField& field);

/// Sup over the interior of |field - backward_semigroup(s, field)|. Without
/// dt, the largest stable step dividing s is used.
double dpp_residual(const ProblemSpec& spec, const ValueField& field, double s,
                    std::optional<double> dt = std::nullopt, int threads = 1);

}  // namespace rctl
