#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "robustctl/grid.hpp"
#include "robustctl/problem.hpp"

namespace rctl {

/// Adapted choice of the quadratic-variation density Q_t.
class VolatilityPolicy {
 public:
  enum class Kind { Constant, Schedule, Feedback };

  static VolatilityPolicy constant(Eigen::MatrixXd q);
  /// Piecewise constant: entry (t_k, Q_k) is in force on [t_k, t_{k+1}). The
  /// first time must be 0.
  static VolatilityPolicy schedule(std::vector<std::pair<double, Eigen::MatrixXd>> pieces);
  /// Bang-bang rule: at x pick the extreme point of Gamma maximising
  /// tr[Q sigma^T D2V sigma], with D2V from grid second differences of `field`.
  static VolatilityPolicy feedback(ValueField field);

  Kind kind() const { return kind_; }
  std::string name() const;
  /// Throws ValidationError unless every fixed Q lies in Gamma.
  void validate(const UncertaintySet& gamma) const;

  const std::vector<std::pair<double, Eigen::MatrixXd>>& pieces() const { return pieces_; }
  const std::shared_ptr<const ValueField>& field() const { return field_; }

 private:
  Kind kind_ = Kind::Constant;
  std::vector<std::pair<double, Eigen::MatrixXd>> pieces_;
  std::shared_ptr<const ValueField> field_;
};

/// Feedback or constant control.
class ControlPolicy {
 public:
  enum class Kind { Constant, Feedback };

  static ControlPolicy constant(std::vector<double> u);
  /// Nearest-node lookup in the policy array of `field`.
  static ControlPolicy feedback(ValueField field, const ControlSet& controls);

  Kind kind() const { return kind_; }
  std::string name() const;
  void validate(const ControlSet& controls, int m) const;

  std::vector<double> at(const std::vector<double>& x) const;
  /// Writes u(x) into `u`; `x` and `u` have the state and control dimensions.
  void at(std::span<const double> x, std::span<double> u) const;

 private:
  Kind kind_ = Kind::Constant;
  std::vector<double> u_;
  std::shared_ptr<const ValueField> field_;
  std::vector<std::vector<double>> node_controls_;
};

/// Euler trajectories of the controlled SDE under one volatility policy.
struct PathBundle {
  int n = 1;
  int d = 1;
  double dt = 0.0;
  double T = 0.0;
  std::size_t steps = 0;
  std::size_t n_paths = 0;
  std::uint64_t seed = 0;
  std::string scenario;
  std::vector<double> states;       // path, step (0..steps), component
  std::vector<double> increments;   // path, step (0..steps-1), Brownian increment dW (d)
  std::vector<double> qv;           // path, step (0..steps-1), Q_k dt (d x d, row-major)
  std::vector<char> flagged;        // per path: overflow, frozen thereafter
  std::size_t flagged_count = 0;

  std::span<const double> state(std::size_t path, std::size_t step) const {
    return {states.data() + (path * (steps + 1) + step) * static_cast<std::size_t>(n),
            static_cast<std::size_t>(n)};
  }
  std::span<const double> qv_at(std::size_t path, std::size_t step) const {
    return {qv.data() + (path * steps + step) * static_cast<std::size_t>(d * d),
            static_cast<std::size_t>(d * d)};
  }
  std::span<const double> increment(std::size_t path, std::size_t step) const {
    return {increments.data() + (path * steps + step) * static_cast<std::size_t>(d),
            static_cast<std::size_t>(d)};
  }
};

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n_paths = 0;
};

struct SimulationOptions {
  int threads = 1;
  /// Paths per block; results do not depend on it.
  std::size_t block = 256;
};

PathBundle simulate_gsde(const ProblemSpec& spec, const std::vector<double>& x0, const ControlPolicy& ctrl,
                         const VolatilityPolicy& vol, double dt, double T, std::size_t n_paths,
                         std::uint64_t seed, const SimulationOptions& options = {});

/// Sample mean and standard error of payoff(X_T) over unflagged paths.
McEstimate terminal_estimate(const PathBundle& bundle,
                             const std::function<double(std::span<const double>)>& payoff);

/// CSV "path,step,t,x1..xn,q11..qdd"; the q cells hold Q_k dt of the step
/// starting at that row and are empty on the last row of each path.
void write_paths_csv(std::ostream& out, const PathBundle& bundle);

struct RobustEstimate {
  double value = 0.0;        // lower bound on the robust expectation
  std::size_t index = 0;     // attaining scenario (lowest index on ties)
  double std_error = 0.0;    // of the attaining scenario
};

RobustEstimate robust_expectation(const std::vector<McEstimate>& per_scenario);

struct ScenarioCost {
  std::string scenario;
  McEstimate estimate;
  double max_abs_state = 0.0;  // over paths at T_cut
};

struct CostEstimate {
  std::vector<ScenarioCost> scenarios;
  RobustEstimate robust;
  double tail_bound = 0.0;  // e^{-lambda T_cut} / lambda * max |psi(X_Tcut)|
  double lambda = 0.0;
  double dt = 0.0;
  double T_cut = 0.0;
  std::size_t flagged = 0;
};

/// E[int_0^T_cut e^{-lambda s} psi(X_s, u_s) ds] per scenario by the
/// trapezoid rule along each path, then the maximum over the family. All
/// scenarios share the same Brownian increments.
CostEstimate discounted_cost(const ProblemSpec& spec, const std::vector<double>& x0, const ControlPolicy& ctrl,
                             const std::vector<VolatilityPolicy>& family, double dt, double T_cut,
                             std::size_t n_paths, std::uint64_t seed, const SimulationOptions& options = {});

struct MomentEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
  double bound = 0.0;
  double exact = 0.0;  // exp(p (p - 1) beta^2 t / 2)
};

/// p-th moment of exp(beta W_t - beta^2 t / 2) with beta = alpha2, against the
/// bound exp(C_G (p^2 - p) alpha2^2 t), C_G = 1 + (sigma_hi2 + 1 / sigma_lo2) / 2.
MomentEstimate exp_martingale_moment(double alpha2, const Eigen::MatrixXd& q, const UncertaintySet& gamma,
                                     double p, double t, std::size_t n_paths, std::uint64_t seed);

struct ContractionEstimate {
  double estimate = 0.0;  // mean of |X^x_t - X^y_t|^2
  double std_error = 0.0;
  double bound = 0.0;     // e^{-2 eta t} |x - y|^2
  bool pass = false;
  std::vector<double> per_path;
};

/// Synchronously coupled flows from x and y under one constant scenario.
ContractionEstimate flow_contraction_estimate(const ProblemSpec& spec, const std::vector<double>& x,
                                              const std::vector<double>& y, const Eigen::MatrixXd& q,
                                              const ControlPolicy& ctrl, double dt, double t,
                                              std::size_t n_paths, std::uint64_t seed, double eta_hat,
                                              const SimulationOptions& options = {});

}  // namespace rctl
