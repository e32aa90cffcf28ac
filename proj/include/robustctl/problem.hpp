#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "robustctl/expression.hpp"

namespace rctl {

/// Raised when a problem definition violates a structural invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Box U = [lower, upper] sampled by a uniform lattice with
/// `points_per_axis` points per control axis.
struct ControlSet {
  std::vector<double> lower;
  std::vector<double> upper;
  int points_per_axis = 33;

  void validate() const;
  std::size_t dimension() const { return lower.size(); }
  std::size_t lattice_size() const;
  /// Lattice point with flat index `index`; the first control axis varies slowest.
  std::vector<double> lattice_point(std::size_t index) const;
  std::vector<std::vector<double>> lattice() const;
  /// Flat index of the lattice point nearest to `u`.
  std::size_t nearest_index(const std::vector<double>& u) const;
  bool contains(const std::vector<double>& u, double slack = 1e-12) const;
};

/// The set of admissible quadratic-variation densities.
///
/// For d = 1 this is exactly the interval [sigma_lo2, sigma_hi2]. For d >= 2 the
/// finite `candidates` list stands in for the set, which makes every sup over it
/// a lower approximation of the true one.
struct UncertaintySet {
  int dimension = 1;
  double sigma_lo2 = 1.0;
  double sigma_hi2 = 1.0;
  std::vector<Eigen::MatrixXd> candidates;

  void validate() const;
  bool admits(const Eigen::MatrixXd& q, double slack = 1e-12) const;
  /// Matrices the sup inside G is taken over: the two endpoints for d = 1, the
  /// candidate list otherwise.
  std::vector<Eigen::MatrixXd> extreme_points() const;
};

/// G(A) = 1/2 sup_{Q} tr[A Q].
double g_of(const UncertaintySet& gamma, const Eigen::MatrixXd& a);

/// Coefficient data of the controlled forward/backward system.
///
/// Variables are named x1..xn (state), u1..um (control), y (value) and z1..zd.
/// b, h and sigma may only use state and control variables.
struct ProblemSpec {
  int n = 1;
  int d = 1;
  int m = 1;
  std::vector<Expression> b;                             // n
  std::vector<std::vector<std::vector<Expression>>> h;   // d x d x n
  std::vector<std::vector<Expression>> sigma;            // n x d
  Expression f;
  std::vector<std::vector<Expression>> g;                // d x d
  ControlSet controls;
  UncertaintySet gamma;
  std::optional<double> mu;
  std::optional<double> lambda;
  /// Running cost when f was given as -lambda*y + psi.
  std::optional<Expression> psi;

  /// Zero coefficients of the given dimensions, U = [0,1]^m, Gamma = {1}.
  static ProblemSpec zeros(int n, int d, int m);

  void validate() const;

  std::vector<std::string> state_control_names() const;
  /// x1..xn, u1..um, y, z1..zd in that order (the slot layout of every
  /// compiled coefficient).
  std::vector<std::string> all_names() const;
};

/// f = -lambda * y + psi.
Expression discounted_running_cost(double lambda, const Expression& psi);

std::vector<std::string> state_names(int n);
std::vector<std::string> control_names(int m);
std::vector<std::string> z_names(int d);

/// Compiled coefficient functions sharing the slot layout of
/// ProblemSpec::all_names().
class CompiledProblem {
 public:
  explicit CompiledProblem(const ProblemSpec& spec);

  const ProblemSpec& spec() const { return spec_; }
  std::size_t slot_count() const { return slots_; }
  std::size_t x_slot(int i) const { return static_cast<std::size_t>(i); }
  std::size_t u_slot(int j) const { return static_cast<std::size_t>(spec_.n + j); }
  std::size_t y_slot() const { return static_cast<std::size_t>(spec_.n + spec_.m); }
  std::size_t z_slot(int k) const { return y_slot() + 1 + static_cast<std::size_t>(k); }

  /// Writes x, u (and y, z when given) into a slot vector.
  void fill(std::span<double> slots, std::span<const double> x, std::span<const double> u,
            double y = 0.0, std::span<const double> z = {}) const;

  const CompiledExpression& b(int i) const { return b_[i]; }
  const CompiledExpression& h(int i, int j, int k) const { return h_[(i * spec_.d + j) * spec_.n + k]; }
  const CompiledExpression& sigma(int i, int k) const { return sigma_[i * spec_.d + k]; }
  const CompiledExpression& f() const { return f_; }
  const CompiledExpression& g(int i, int j) const { return g_[i * spec_.d + j]; }

  bool has_h() const { return has_h_; }
  bool has_g() const { return has_g_; }

 private:
  ProblemSpec spec_;
  std::size_t slots_;
  std::vector<CompiledExpression> b_, h_, sigma_, g_;
  CompiledExpression f_;
  bool has_h_ = false;
  bool has_g_ = false;
};

/// Box the assumption checker samples from. State bounds are required; the
/// control box defaults to U and the y/z ranges default to [-10, 10].
struct SampleBox {
  std::vector<double> x_lower;
  std::vector<double> x_upper;
  std::optional<std::vector<double>> u_lower;
  std::optional<std::vector<double>> u_upper;
  double y_lower = -10.0;
  double y_upper = 10.0;
  double z_lower = -10.0;
  double z_upper = 10.0;
};

struct AssumptionVerdict {
  std::string name;
  bool pass = false;
  /// Sampled value of the quantity the verdict is based on.
  double measured = 0.0;
  /// Point of worst violation: x, u, then y, z and the paired point when used.
  std::vector<double> witness;
  std::string note;
};

struct AssumptionReport {
  double L = 0.0;
  double alpha1 = 0.0;
  double alpha2 = 0.0;
  double mu_hat = 0.0;
  double eta_hat = 0.0;
  double eta_bar_hat = 0.0;
  double sigma_hi2 = 0.0;
  std::vector<AssumptionVerdict> verdicts;  // B1..B5
  int samples = 0;

  const AssumptionVerdict& verdict(const std::string& name) const;
};

/// Sampled estimates of the structural constants and per-assumption verdicts.
///
/// The estimates are extremal difference quotients over random sample pairs,
/// so they bound the true constants from one side only.
AssumptionReport check_assumptions(const ProblemSpec& spec, const SampleBox& box, int n_samples,
                                   std::uint64_t rng_seed);

}  // namespace rctl
