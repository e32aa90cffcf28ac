#include "robustctl/montecarlo.hpp"

#include <boost/random/normal_distribution.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "robustctl/parallel.hpp"
#include "robustctl/rng.hpp"

namespace rctl {

namespace {

constexpr double kOverflow = 1e150;

std::string matrix_label(const Eigen::MatrixXd& q) {
  std::string s = "[";
  for (int i = 0; i < q.rows(); ++i) {
    for (int j = 0; j < q.cols(); ++j) {
      if (i || j) s += ' ';
      s += format_double(q(i, j));
    }
  }
  return s + "]";
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& q) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(q);
  if (es.eigenvalues().minCoeff() < -1e-12) throw ValidationError("volatility matrix is not positive semidefinite");
  Eigen::VectorXd r = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * r.asDiagonal() * es.eigenvectors().transpose();
}

McEstimate summarize(const std::vector<double>& values, const std::vector<char>& flagged) {
  McEstimate e;
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (flagged.empty() || !flagged[i]) {
      sum += values[i];
      ++e.n_paths;
    }
  }
  if (e.n_paths == 0) {
    e.mean = std::numeric_limits<double>::quiet_NaN();
    return e;
  }
  e.mean = sum / static_cast<double>(e.n_paths);
  double ss = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (flagged.empty() || !flagged[i]) ss += (values[i] - e.mean) * (values[i] - e.mean);
  }
  if (e.n_paths > 1) e.std_error = std::sqrt(ss / static_cast<double>(e.n_paths - 1) / static_cast<double>(e.n_paths));
  return e;
}

std::size_t step_count(double T, double dt) {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("dt must be positive");
  if (!(T >= dt * (1.0 - 1e-12))) throw ValidationError("horizon must be at least dt");
  return static_cast<std::size_t>(std::ceil(T / dt - 1e-9));
}

}  // namespace

// ------------------------------------------------------------ policies

VolatilityPolicy VolatilityPolicy::constant(Eigen::MatrixXd q) {
  VolatilityPolicy p;
  p.kind_ = Kind::Constant;
  p.pieces_.emplace_back(0.0, std::move(q));
  return p;
}

VolatilityPolicy VolatilityPolicy::schedule(std::vector<std::pair<double, Eigen::MatrixXd>> pieces) {
  if (pieces.empty() || pieces.front().first != 0.0) {
    throw ValidationError("volatility schedule must start at t = 0");
  }
  for (std::size_t k = 1; k < pieces.size(); ++k) {
    if (!(pieces[k].first > pieces[k - 1].first)) throw ValidationError("schedule times must increase");
  }
  VolatilityPolicy p;
  p.kind_ = Kind::Schedule;
  p.pieces_ = std::move(pieces);
  return p;
}

VolatilityPolicy VolatilityPolicy::feedback(ValueField field) {
  field.validate();
  VolatilityPolicy p;
  p.kind_ = Kind::Feedback;
  p.field_ = std::make_shared<const ValueField>(std::move(field));
  return p;
}

std::string VolatilityPolicy::name() const {
  switch (kind_) {
    case Kind::Constant: return "constant " + matrix_label(pieces_.front().second);
    case Kind::Schedule: return "schedule(" + std::to_string(pieces_.size()) + " pieces)";
    case Kind::Feedback: return "feedback";
  }
  return {};
}

void VolatilityPolicy::validate(const UncertaintySet& gamma) const {
  for (const auto& [t, q] : pieces_) {
    if (q.rows() != gamma.dimension || q.cols() != gamma.dimension) {
      throw ValidationError("volatility matrix has the wrong dimension");
    }
    if (!gamma.admits(q)) throw ValidationError("volatility matrix " + matrix_label(q) + " is outside Gamma");
  }
  if (field_ && field_->grid.dimension() < 1) throw ValidationError("feedback field is empty");
}

ControlPolicy ControlPolicy::constant(std::vector<double> u) {
  ControlPolicy p;
  p.kind_ = Kind::Constant;
  p.u_ = std::move(u);
  return p;
}

ControlPolicy ControlPolicy::feedback(ValueField field, const ControlSet& controls) {
  field.validate();
  if (!field.policy) throw ValidationError("feedback control needs a field with a policy array");
  ControlPolicy p;
  p.kind_ = Kind::Feedback;
  const std::size_t lattice = controls.lattice_size();
  for (std::size_t idx : *field.policy) {
    if (idx >= lattice) throw ValidationError("policy index outside the control lattice");
    p.node_controls_.push_back(controls.lattice_point(idx));
  }
  p.field_ = std::make_shared<const ValueField>(std::move(field));
  return p;
}

std::string ControlPolicy::name() const {
  if (kind_ == Kind::Feedback) return "feedback";
  std::string s = "constant (";
  for (std::size_t j = 0; j < u_.size(); ++j) s += (j ? ", " : "") + format_double(u_[j]);
  return s + ")";
}

void ControlPolicy::validate(const ControlSet& controls, int m) const {
  if (kind_ == Kind::Constant) {
    if (u_.size() != static_cast<std::size_t>(m)) throw ValidationError("control has the wrong dimension");
    if (!controls.contains(u_)) throw ValidationError("control lies outside U");
    return;
  }
  for (const auto& u : node_controls_) {
    if (u.size() != static_cast<std::size_t>(m)) throw ValidationError("control has the wrong dimension");
  }
}

std::vector<double> ControlPolicy::at(const std::vector<double>& x) const {
  if (kind_ == Kind::Constant) return u_;
  return node_controls_[field_->grid.nearest_node(x)];
}

void ControlPolicy::at(std::span<const double> x, std::span<double> u) const {
  const auto& src = kind_ == Kind::Constant ? u_ : node_controls_[field_->grid.nearest_node(x)];
  std::copy(src.begin(), src.end(), u.begin());
}

// ------------------------------------------------------------ engine

namespace {

// Finite list of Q with a per-path selection rule.
class VolSelector {
 public:
  VolSelector(const CompiledProblem& cp, const ControlPolicy& ctrl, const VolatilityPolicy& vol) : vol_(vol) {
    const auto& spec = cp.spec();
    vol.validate(spec.gamma);
    if (vol.kind() == VolatilityPolicy::Kind::Feedback) {
      q_ = spec.gamma.extreme_points();
      build_feedback_table(cp, ctrl, *vol.field());
    } else {
      for (const auto& [t, q] : vol.pieces()) {
        times_.push_back(t);
        q_.push_back(q);
      }
    }
    for (const auto& q : q_) {
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = symmetric_sqrt(q);
      flat_roots_.emplace_back(r.data(), r.data() + r.size());
    }
  }

  bool uniform() const { return vol_.kind() != VolatilityPolicy::Kind::Feedback; }

  // Selection when every path uses the same Q at time t.
  std::size_t at_time(double t) const {
    std::size_t k = 0;
    while (k + 1 < times_.size() && times_[k + 1] <= t + 1e-12) ++k;
    return k;
  }

  std::size_t at_state(std::span<const double> x) const { return table_[vol_.field()->grid.nearest_node(x)]; }

  const Eigen::MatrixXd& q(std::size_t i) const { return q_[i]; }
  const double* flat_root(std::size_t i) const { return flat_roots_[i].data(); }

 private:
  void build_feedback_table(const CompiledProblem& cp, const ControlPolicy& ctrl, const ValueField& field) {
    const auto& spec = cp.spec();
    const Grid& grid = field.grid;
    if (grid.dimension() != spec.n) throw ValidationError("feedback field dimension must equal n");
    const int n = spec.n;
    table_.assign(grid.size(), 0);
    std::vector<double> slots(cp.slot_count()), u(spec.m);
    for (std::size_t node = 0; node < grid.size(); ++node) {
      const auto x = grid.point(node);
      ctrl.at(x, u);
      cp.fill(slots, x, u);
      Eigen::MatrixXd sig(n, spec.d);
      for (int i = 0; i < n; ++i) {
        for (int k = 0; k < spec.d; ++k) sig(i, k) = cp.sigma(i, k)(slots);
      }
      Eigen::MatrixXd d2 = Eigen::MatrixXd::Zero(n, n);
      bool inside = true;
      for (int k = 0; k < n; ++k) {
        int i = grid.index_along(node, k);
        if (i == 0 || i == grid.axis(k).count - 1) inside = false;
      }
      if (inside) {
        const double v0 = field.values[node];
        for (int k = 0; k < n; ++k) {
          const std::size_t s = grid.stride(k);
          const double h = grid.axis(k).spacing();
          d2(k, k) = (field.values[node + s] - 2.0 * v0 + field.values[node - s]) / (h * h);
          for (int l = k + 1; l < n; ++l) {
            const std::size_t t = grid.stride(l);
            const double c = (field.values[node + s + t] - field.values[node + s - t] -
                              field.values[node - s + t] + field.values[node - s - t]) /
                             (4.0 * h * grid.axis(l).spacing());
            d2(k, l) = d2(l, k) = c;
          }
        }
      }
      Eigen::MatrixXd m = sig.transpose() * d2 * sig;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < q_.size(); ++c) {
        const double val = q_[c].cwiseProduct(m).sum();
        if (val > best) {
          best = val;
          table_[node] = c;
        }
      }
    }
  }

  const VolatilityPolicy& vol_;
  std::vector<double> times_;
  std::vector<Eigen::MatrixXd> q_;
  std::vector<std::vector<double>> flat_roots_;  // row-major
  std::vector<std::size_t> table_;
};

struct Block {
  std::size_t first = 0;
  std::size_t count = 0;
  std::vector<double> x;   // component-major: x[k * count + i]
  std::vector<double> u;   // u[j * count + i]
  std::vector<Xoshiro256pp> rng;
  std::vector<char> flagged;
  std::vector<std::size_t> qidx;
  std::vector<const double*> cols;  // expression slots into x and u
};

class Engine {
 public:
  Engine(const CompiledProblem& cp, const ControlPolicy& ctrl, const VolSelector& vol, double dt)
      : cp_(cp), ctrl_(ctrl), vol_(vol), n_(cp.spec().n), d_(cp.spec().d), m_(cp.spec().m), dt_(dt),
        sqrt_dt_(std::sqrt(dt)) {}

  void init(Block& blk, std::size_t first, std::size_t count, const std::vector<double>& x0,
            std::uint64_t seed) const {
    blk.first = first;
    blk.count = count;
    blk.x.resize(static_cast<std::size_t>(n_) * count);
    for (int k = 0; k < n_; ++k) std::fill_n(blk.x.begin() + k * count, count, x0[k]);
    blk.u.assign(static_cast<std::size_t>(m_) * count, 0.0);
    blk.rng.clear();
    for (std::size_t i = 0; i < count; ++i) blk.rng.push_back(path_stream(seed, first + i));
    blk.flagged.assign(count, 0);
    blk.qidx.assign(count, 0);
    blk.cols = columns(blk);
    if (ctrl_.kind() == ControlPolicy::Kind::Constant) refresh_controls(blk);
  }

  /// Controls and volatility indices at step k.
  void prepare(Block& blk, std::size_t k) const {
    if (ctrl_.kind() == ControlPolicy::Kind::Feedback) refresh_controls(blk);
    if (vol_.uniform()) {
      const std::size_t q = vol_.at_time(static_cast<double>(k) * dt_);
      if (k == 0 || blk.qidx[0] != q) std::fill(blk.qidx.begin(), blk.qidx.end(), q);
    } else {
      std::vector<double> x(n_);
      for (std::size_t i = 0; i < blk.count; ++i) {
        for (int c = 0; c < n_; ++c) x[c] = blk.x[c * blk.count + i];
        blk.qidx[i] = vol_.at_state(x);
      }
    }
  }

  std::vector<const double*> columns(const Block& blk) const {
    std::vector<const double*> cols(cp_.slot_count(), nullptr);
    for (int k = 0; k < n_; ++k) cols[cp_.x_slot(k)] = blk.x.data() + k * blk.count;
    for (int j = 0; j < m_; ++j) cols[cp_.u_slot(j)] = blk.u.data() + j * blk.count;
    return cols;
  }

  /// Euler step from step k (after prepare). dw/qv receive per-path records
  /// (count x d and count x d x d) when non-null.
  void advance(Block& blk, double* dw, double* qv) const {
    const std::size_t B = blk.count;
    const auto& cols = blk.cols;
    const auto n = static_cast<std::size_t>(n_), d = static_cast<std::size_t>(d_);
    bval_.resize(n * B);
    sval_.resize(n * d * B);
    wval_.resize(d * B);
    dbval_.resize(d * B);
    for (int k = 0; k < n_; ++k) cp_.b(k).evaluate_batch(cols, B, bval_.data() + k * B);
    for (int i = 0; i < n_; ++i) {
      for (int k = 0; k < d_; ++k) cp_.sigma(i, k).evaluate_batch(cols, B, sval_.data() + (i * d_ + k) * B);
    }
    if (cp_.has_h()) {
      hval_.resize(d * d * n * B);
      for (int i = 0; i < d_; ++i) {
        for (int j = 0; j < d_; ++j) {
          for (int k = 0; k < n_; ++k) {
            cp_.h(i, j, k).evaluate_batch(cols, B, hval_.data() + ((i * d_ + j) * n_ + k) * B);
          }
        }
      }
    }

    // Draws are consumed path by path so a path's stream never depends on B.
    boost::random::normal_distribution<double> normal;
    Xoshiro256pp* rng = blk.rng.data();
    double* wv = wval_.data();
    if (d == 1) {
      for (std::size_t p = 0; p < B; ++p) wv[p] = normal(rng[p]);
    } else {
      for (std::size_t p = 0; p < B; ++p) {
        for (std::size_t j = 0; j < d; ++j) wv[j * B + p] = normal(rng[p]);
      }
    }
    for (std::size_t i = 0; i < d * B; ++i) wv[i] *= sqrt_dt_;
    // db = root(Q) w, component-major.
    if (vol_.uniform()) {
      const double* root = vol_.flat_root(blk.qidx[0]);
      for (std::size_t i = 0; i < d; ++i) {
        double* db = dbval_.data() + i * B;
        std::fill_n(db, B, 0.0);
        for (std::size_t j = 0; j < d; ++j) {
          const double r = root[i * d + j];
          const double* w = wval_.data() + j * B;
          for (std::size_t p = 0; p < B; ++p) db[p] += r * w[p];
        }
      }
    } else {
      for (std::size_t p = 0; p < B; ++p) {
        const double* root = vol_.flat_root(blk.qidx[p]);
        for (std::size_t i = 0; i < d; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += root[i * d + j] * wval_[j * B + p];
          dbval_[i * B + p] = s;
        }
      }
    }
    if (dw || qv) {
      for (std::size_t p = 0; p < B; ++p) {
        const Eigen::MatrixXd& qm = vol_.q(blk.qidx[p]);
        for (std::size_t i = 0; i < d; ++i) {
          if (dw) dw[p * d + i] = wval_[i * B + p];
          for (std::size_t j = 0; j < d && qv; ++j) qv[(p * d + i) * d + j] = qm(i, j) * dt_;
        }
      }
    }

    // Proposed states overwrite bval_.
    for (std::size_t k = 0; k < n; ++k) {
      double* v = bval_.data() + k * B;
      const double* x = blk.x.data() + k * B;
      for (std::size_t p = 0; p < B; ++p) v[p] = x[p] + v[p] * dt_;
      for (std::size_t j = 0; j < d; ++j) {
        const double* s = sval_.data() + (k * d + j) * B;
        const double* db = dbval_.data() + j * B;
        for (std::size_t p = 0; p < B; ++p) v[p] += s[p] * db[p];
      }
      if (cp_.has_h()) {
        for (std::size_t p = 0; p < B; ++p) {
          const Eigen::MatrixXd& qm = vol_.q(blk.qidx[p]);
          for (std::size_t ij = 0; ij < d * d; ++ij) {
            v[p] += hval_[(ij * n + k) * B + p] * qm(ij / d, ij % d) * dt_;
          }
        }
      }
    }
    // A path that leaves the finite range is flagged and keeps its last state.
    char* flagged = blk.flagged.data();
    if (n == 1) {
      const double* v = bval_.data();
      double* x = blk.x.data();
      for (std::size_t p = 0; p < B; ++p) {
        const bool good = !flagged[p] && std::fabs(v[p]) <= kOverflow;
        x[p] = good ? v[p] : x[p];
        flagged[p] = !good;
      }
      return;
    }
    auto& ok = okval_;
    ok.resize(B);
    for (std::size_t p = 0; p < B; ++p) ok[p] = flagged[p] ? 0 : 1;
    for (std::size_t k = 0; k < n; ++k) {
      const double* v = bval_.data() + k * B;
      for (std::size_t p = 0; p < B; ++p) ok[p] &= std::fabs(v[p]) <= kOverflow ? 1 : 0;
    }
    for (std::size_t k = 0; k < n; ++k) {
      const double* v = bval_.data() + k * B;
      double* x = blk.x.data() + k * B;
      for (std::size_t p = 0; p < B; ++p) x[p] = ok[p] ? v[p] : x[p];
    }
    for (std::size_t p = 0; p < B; ++p) flagged[p] = ok[p] ? 0 : 1;
  }

  int n() const { return n_; }

 private:
  void refresh_controls(Block& blk) const {
    std::vector<double> x(n_), u(m_);
    for (std::size_t i = 0; i < blk.count; ++i) {
      for (int c = 0; c < n_; ++c) x[c] = blk.x[c * blk.count + i];
      ctrl_.at(x, u);
      for (int j = 0; j < m_; ++j) blk.u[j * blk.count + i] = u[j];
    }
  }

  const CompiledProblem& cp_;
  const ControlPolicy& ctrl_;
  const VolSelector& vol_;
  int n_, d_, m_;
  double dt_, sqrt_dt_;
  static thread_local std::vector<double> bval_, sval_, hval_, wval_, dbval_;
  static thread_local std::vector<unsigned char> okval_;
};

thread_local std::vector<double> Engine::bval_;
thread_local std::vector<double> Engine::sval_;
thread_local std::vector<double> Engine::hval_;
thread_local std::vector<double> Engine::wval_;
thread_local std::vector<double> Engine::dbval_;
thread_local std::vector<unsigned char> Engine::okval_;

void check_common(const ProblemSpec& spec, const std::vector<double>& x0, const ControlPolicy& ctrl,
                  std::size_t n_paths) {
  spec.validate();
  if (x0.size() != static_cast<std::size_t>(spec.n)) throw ValidationError("initial state has the wrong dimension");
  for (double v : x0) {
    if (!std::isfinite(v)) throw ValidationError("initial state must be finite");
  }
  if (n_paths < 1) throw ValidationError("n_paths must be at least 1");
  ctrl.validate(spec.controls, spec.m);
}

std::size_t block_count(std::size_t n_paths, std::size_t block) { return (n_paths + block - 1) / block; }

}  // namespace

PathBundle simulate_gsde(const ProblemSpec& spec, const std::vector<double>& x0, const ControlPolicy& ctrl,
                         const VolatilityPolicy& vol, double dt, double T, std::size_t n_paths,
                         std::uint64_t seed, const SimulationOptions& options) {
  check_common(spec, x0, ctrl, n_paths);
  const std::size_t steps = step_count(T, dt);
  CompiledProblem cp(spec);
  VolSelector selector(cp, ctrl, vol);
  Engine engine(cp, ctrl, selector, dt);

  PathBundle out;
  out.n = spec.n;
  out.d = spec.d;
  out.dt = dt;
  out.T = static_cast<double>(steps) * dt;
  out.steps = steps;
  out.n_paths = n_paths;
  out.seed = seed;
  out.scenario = vol.name();
  const auto n = static_cast<std::size_t>(spec.n), d = static_cast<std::size_t>(spec.d);
  out.states.assign(n_paths * (steps + 1) * n, 0.0);
  out.increments.assign(n_paths * steps * d, 0.0);
  out.qv.assign(n_paths * steps * d * d, 0.0);
  out.flagged.assign(n_paths, 0);

  const std::size_t B = std::max<std::size_t>(1, options.block);
  WorkerPool pool(options.threads);
  pool.run(block_count(n_paths, B), [&](std::size_t begin, std::size_t end) {
    Block blk;
    std::vector<double> dw, qv;
    for (std::size_t b = begin; b < end; ++b) {
      const std::size_t first = b * B, count = std::min(B, n_paths - first);
      engine.init(blk, first, count, x0, seed);
      dw.resize(count * d);
      qv.resize(count * d * d);
      auto record = [&](std::size_t k) {
        for (std::size_t i = 0; i < count; ++i) {
          for (std::size_t c = 0; c < n; ++c) {
            out.states[((first + i) * (steps + 1) + k) * n + c] = blk.x[c * count + i];
          }
        }
      };
      record(0);
      for (std::size_t k = 0; k < steps; ++k) {
        engine.prepare(blk, k);
        engine.advance(blk, dw.data(), qv.data());
        for (std::size_t i = 0; i < count; ++i) {
          std::copy_n(dw.data() + i * d, d, out.increments.data() + ((first + i) * steps + k) * d);
          std::copy_n(qv.data() + i * d * d, d * d, out.qv.data() + ((first + i) * steps + k) * d * d);
        }
        record(k + 1);
      }
      for (std::size_t i = 0; i < count; ++i) out.flagged[first + i] = blk.flagged[i];
    }
  });
  out.flagged_count = static_cast<std::size_t>(std::count(out.flagged.begin(), out.flagged.end(), 1));
  return out;
}

McEstimate terminal_estimate(const PathBundle& bundle,
                             const std::function<double(std::span<const double>)>& payoff) {
  std::vector<double> values(bundle.n_paths);
  for (std::size_t p = 0; p < bundle.n_paths; ++p) {
    values[p] = bundle.flagged[p] ? 0.0 : payoff(bundle.state(p, bundle.steps));
  }
  return summarize(values, bundle.flagged);
}

void write_paths_csv(std::ostream& out, const PathBundle& bundle) {
  out << "path,step,t";
  for (int k = 0; k < bundle.n; ++k) out << ",x" << k + 1;
  for (int i = 0; i < bundle.d; ++i) {
    for (int j = 0; j < bundle.d; ++j) out << ",q" << i + 1 << j + 1;
  }
  out << '\n';
  for (std::size_t p = 0; p < bundle.n_paths; ++p) {
    for (std::size_t k = 0; k <= bundle.steps; ++k) {
      out << p << ',' << k << ',' << format_double(static_cast<double>(k) * bundle.dt);
      for (double v : bundle.state(p, k)) out << ',' << format_double(v);
      if (k < bundle.steps) {
        for (double v : bundle.qv_at(p, k)) out << ',' << format_double(v);
      } else {
        for (int c = 0; c < bundle.d * bundle.d; ++c) out << ',';
      }
      out << '\n';
    }
  }
}

RobustEstimate robust_expectation(const std::vector<McEstimate>& per_scenario) {
  if (per_scenario.empty()) throw ValidationError("robust expectation needs at least one scenario");
  RobustEstimate r;
  r.value = per_scenario[0].mean;
  r.std_error = per_scenario[0].std_error;
  for (std::size_t i = 1; i < per_scenario.size(); ++i) {
    if (per_scenario[i].mean > r.value) {
      r.value = per_scenario[i].mean;
      r.index = i;
      r.std_error = per_scenario[i].std_error;
    }
  }
  return r;
}

CostEstimate discounted_cost(const ProblemSpec& spec, const std::vector<double>& x0, const ControlPolicy& ctrl,
                             const std::vector<VolatilityPolicy>& family, double dt, double T_cut,
                             std::size_t n_paths, std::uint64_t seed, const SimulationOptions& options) {
  check_common(spec, x0, ctrl, n_paths);
  if (!spec.psi || !spec.lambda) throw ValidationError("discounted cost needs psi and lambda");
  const double lambda = *spec.lambda;
  if (!(lambda > 0.0)) throw ValidationError("lambda must be positive");
  if (T_cut < 5.0 / lambda * (1.0 - 1e-12)) {
    throw ValidationError("T_cut must be at least 5 / lambda (got " + format_double(T_cut) + ")");
  }
  if (family.empty()) throw ValidationError("scenario family is empty");
  const std::size_t steps = step_count(T_cut, dt);
  CompiledProblem cp(spec);
  const CompiledExpression psi(*spec.psi, spec.all_names());

  CostEstimate result;
  result.lambda = lambda;
  result.dt = dt;
  result.T_cut = static_cast<double>(steps) * dt;
  std::vector<double> discount(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) discount[k] = std::exp(-lambda * static_cast<double>(k) * dt);

  const std::size_t B = std::max<std::size_t>(1, options.block);
  WorkerPool pool(options.threads);
  double max_psi_end = 0.0;
  for (const auto& vol : family) {
    VolSelector selector(cp, ctrl, vol);
    Engine engine(cp, ctrl, selector, dt);
    std::vector<double> integral(n_paths, 0.0), end_psi(n_paths, 0.0), end_state(n_paths, 0.0);
    std::vector<char> flagged(n_paths, 0);
    pool.run(block_count(n_paths, B), [&](std::size_t begin, std::size_t end) {
      Block blk;
      std::vector<double> w;
      for (std::size_t b = begin; b < end; ++b) {
        const std::size_t first = b * B, count = std::min(B, n_paths - first);
        engine.init(blk, first, count, x0, seed);
        w.resize(count);
        double* acc = integral.data() + first;
        for (std::size_t k = 0;; ++k) {
          engine.prepare(blk, k);
          psi.evaluate_batch(blk.cols, count, w.data());
          const double weight = (k == 0 || k == steps ? 0.5 : 1.0) * discount[k] * dt;
          for (std::size_t i = 0; i < count; ++i) acc[i] += weight * w[i];
          if (k == steps) break;
          engine.advance(blk, nullptr, nullptr);
        }
        for (std::size_t i = 0; i < count; ++i) {
          flagged[first + i] = blk.flagged[i] || !std::isfinite(acc[i]);
          end_psi[first + i] = w[i];
          double r2 = 0.0;
          for (int c = 0; c < engine.n(); ++c) r2 += blk.x[c * count + i] * blk.x[c * count + i];
          end_state[first + i] = std::sqrt(r2);
        }
      }
    });
    ScenarioCost sc;
    sc.scenario = vol.name();
    sc.estimate = summarize(integral, flagged);
    for (std::size_t i = 0; i < n_paths; ++i) {
      if (flagged[i]) {
        ++result.flagged;
        continue;
      }
      sc.max_abs_state = std::max(sc.max_abs_state, end_state[i]);
      max_psi_end = std::max(max_psi_end, std::fabs(end_psi[i]));
    }
    result.scenarios.push_back(std::move(sc));
  }
  std::vector<McEstimate> estimates;
  for (const auto& s : result.scenarios) estimates.push_back(s.estimate);
  result.robust = robust_expectation(estimates);
  result.tail_bound = std::exp(-lambda * result.T_cut) / lambda * max_psi_end;
  return result;
}

MomentEstimate exp_martingale_moment(double alpha2, const Eigen::MatrixXd& q, const UncertaintySet& gamma,
                                     double p, double t, std::size_t n_paths, std::uint64_t seed) {
  if (!(p >= 1.0)) throw ValidationError("moment order p must be >= 1");
  if (!(t >= 0.0)) throw ValidationError("t must be nonnegative");
  if (n_paths < 1) throw ValidationError("n_paths must be at least 1");
  gamma.validate();
  if (q.rows() != gamma.dimension || q.cols() != gamma.dimension || !gamma.admits(q)) {
    throw ValidationError("scenario matrix is outside Gamma");
  }
  // The law of Gamma_t = exp(beta W_t - beta^2 t / 2) does not involve Q.
  const double beta = alpha2;
  boost::random::normal_distribution<double> normal;
  std::vector<double> values(n_paths);
  for (std::size_t i = 0; i < n_paths; ++i) {
    auto rng = path_stream(seed, i);
    const double w = std::sqrt(t) * normal(rng);
    values[i] = std::exp(p * (beta * w - 0.5 * beta * beta * t));
  }
  const McEstimate e = summarize(values, {});
  const double c_g = 1.0 + 0.5 * (gamma.sigma_hi2 + 1.0 / gamma.sigma_lo2);
  MomentEstimate r;
  r.estimate = e.mean;
  r.std_error = e.std_error;
  r.bound = std::exp(c_g * (p * p - p) * alpha2 * alpha2 * t);
  r.exact = std::exp(0.5 * p * (p - 1.0) * beta * beta * t);
  return r;
}

ContractionEstimate flow_contraction_estimate(const ProblemSpec& spec, const std::vector<double>& x,
                                              const std::vector<double>& y, const Eigen::MatrixXd& q,
                                              const ControlPolicy& ctrl, double dt, double t,
                                              std::size_t n_paths, std::uint64_t seed, double eta_hat,
                                              const SimulationOptions& options) {
  check_common(spec, x, ctrl, n_paths);
  if (y.size() != x.size()) throw ValidationError("initial states differ in dimension");
  const std::size_t steps = step_count(t, dt);
  CompiledProblem cp(spec);
  const VolatilityPolicy vol = VolatilityPolicy::constant(q);
  VolSelector selector(cp, ctrl, vol);
  Engine engine(cp, ctrl, selector, dt);

  ContractionEstimate r;
  r.per_path.assign(n_paths, 0.0);
  std::vector<char> flagged(n_paths, 0);
  const std::size_t B = std::max<std::size_t>(1, options.block);
  WorkerPool pool(options.threads);
  pool.run(block_count(n_paths, B), [&](std::size_t begin, std::size_t end) {
    Block bx, by;
    for (std::size_t b = begin; b < end; ++b) {
      const std::size_t first = b * B, count = std::min(B, n_paths - first);
      // Same seed and path index: both flows see identical increments.
      engine.init(bx, first, count, x, seed);
      engine.init(by, first, count, y, seed);
      for (std::size_t k = 0; k < steps; ++k) {
        engine.prepare(bx, k);
        engine.advance(bx, nullptr, nullptr);
        engine.prepare(by, k);
        engine.advance(by, nullptr, nullptr);
      }
      for (std::size_t i = 0; i < count; ++i) {
        double s = 0.0;
        for (int c = 0; c < spec.n; ++c) {
          const double diff = bx.x[c * count + i] - by.x[c * count + i];
          s += diff * diff;
        }
        r.per_path[first + i] = s;
        flagged[first + i] = bx.flagged[i] || by.flagged[i];
      }
    }
  });
  const McEstimate e = summarize(r.per_path, flagged);
  double dist2 = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) dist2 += (x[k] - y[k]) * (x[k] - y[k]);
  r.estimate = e.mean;
  r.std_error = e.std_error;
  r.bound = std::exp(-2.0 * eta_hat * static_cast<double>(steps) * dt) * dist2;
  r.pass = r.estimate <= r.bound + 3.0 * r.std_error;
  return r;
}

}  // namespace rctl
