#include "robustctl/hjbi.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>
#include <tuple>

namespace rctl {

namespace {

constexpr double kCflSafety = 0.9;
constexpr double kInf = std::numeric_limits<double>::infinity();

std::string describe_point(const std::vector<double>& v) {
  std::ostringstream ss;
  ss << '(';
  for (std::size_t i = 0; i < v.size(); ++i) ss << (i ? ", " : "") << v[i];
  ss << ')';
  return ss.str();
}

}  // namespace

CflError::CflError(double requested, double admissible)
    : SchemeError("time step " + format_double(requested) + " exceeds the stability bound; admissible dt <= " +
                  format_double(admissible)),
      requested_(requested),
      admissible_(admissible) {}

// ------------------------------------------------------------ pointwise

std::vector<double> EvaluationPoint::z(const CompiledProblem& cp) const {
  const auto& s = cp.spec();
  std::vector<double> slots(cp.slot_count());
  cp.fill(slots, x, u);
  std::vector<double> out(s.d, 0.0);
  for (int k = 0; k < s.d; ++k) {
    for (int i = 0; i < s.n; ++i) out[k] += p[i] * cp.sigma(i, k)(slots);
  }
  return out;
}

namespace {

void check_point(const CompiledProblem& cp, const EvaluationPoint& pt) {
  const auto& s = cp.spec();
  if (pt.x.size() != static_cast<std::size_t>(s.n) || pt.p.size() != static_cast<std::size_t>(s.n) ||
      pt.u.size() != static_cast<std::size_t>(s.m) || pt.A.rows() != s.n || pt.A.cols() != s.n) {
    throw ValidationError("evaluation point dimensions do not match the problem");
  }
  double scale = std::max(1.0, pt.A.cwiseAbs().maxCoeff());
  if ((pt.A - pt.A.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw ValidationError("evaluation point: A must be symmetric");
  }
}

}  // namespace

HMatrix compute_H(const CompiledProblem& cp, const EvaluationPoint& pt) {
  check_point(cp, pt);
  const auto& s = cp.spec();
  std::vector<double> slots(cp.slot_count());
  cp.fill(slots, pt.x, pt.u);
  Eigen::MatrixXd sig(s.n, s.d);
  for (int i = 0; i < s.n; ++i) {
    for (int k = 0; k < s.d; ++k) sig(i, k) = cp.sigma(i, k)(slots);
  }
  Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(pt.p.data(), s.n);
  Eigen::VectorXd z = sig.transpose() * p;
  cp.fill(slots, pt.x, pt.u, pt.v, std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));

  Eigen::MatrixXd H = sig.transpose() * pt.A * sig;
  for (int i = 0; i < s.d; ++i) {
    for (int j = 0; j < s.d; ++j) {
      double ph = 0.0;
      for (int k = 0; k < s.n; ++k) ph += p[k] * cp.h(i, j, k)(slots);
      H(i, j) += 2.0 * ph + 2.0 * cp.g(i, j)(slots);
    }
  }
  HMatrix out;
  out.asymmetry = (H - H.transpose()).cwiseAbs().maxCoeff();
  out.value = 0.5 * (H + H.transpose());
  return out;
}

HMatrix compute_H(const ProblemSpec& spec, const EvaluationPoint& pt) {
  return compute_H(CompiledProblem(spec), pt);
}

double hjbi_integrand(const CompiledProblem& cp, const EvaluationPoint& pt) {
  const auto& s = cp.spec();
  HMatrix H = compute_H(cp, pt);
  std::vector<double> z = pt.z(cp);
  std::vector<double> slots(cp.slot_count());
  cp.fill(slots, pt.x, pt.u, pt.v, z);
  double pb = 0.0;
  for (int k = 0; k < s.n; ++k) pb += pt.p[k] * cp.b(k)(slots);
  return g_of(s.gamma, H.value) + pb + cp.f()(slots);
}

ResidualResult hjbi_residual_at(const CompiledProblem& cp, const std::vector<double>& x, double v,
                                const std::vector<double>& p, const Eigen::MatrixXd& A) {
  const auto& controls = cp.spec().controls;
  EvaluationPoint pt{x, v, p, A, {}};
  ResidualResult best;
  best.residual = kInf;
  for (std::size_t c = 0; c < controls.lattice_size(); ++c) {
    pt.u = controls.lattice_point(c);
    double val = hjbi_integrand(cp, pt);
    if (val < best.residual) {
      best.residual = val;
      best.control_index = c;
      best.control = pt.u;
    }
  }
  return best;
}

ResidualResult hjbi_residual_at(const ProblemSpec& spec, const std::vector<double>& x, double v,
                                const std::vector<double>& p, const Eigen::MatrixXd& A) {
  return hjbi_residual_at(CompiledProblem(spec), x, v, p, A);
}

// ------------------------------------------------------------ HjbiOperator

// Per (control, scenario) the discrete linear operator is one coefficient row
//   [a_kk / 2 (n), a_kl (P pairs), drift (n), constant, y-slope]
// applied to the stencil: a_kk/2 * D2_k, a_kl * (a_kl >= 0 ? S+ : S-),
// drift_k * (drift_k >= 0 ? D+ : D-), constant * 1 and y-slope * v0.
struct HjbiOperator::Stencil {
  std::array<double, 3> d2{}, sp{}, sm{}, fwd{}, bwd{}, dc{};
  double v0 = 0.0;
};

namespace {

constexpr int pair_count(int n) { return n * (n - 1) / 2; }

constexpr std::size_t kLanes = 8;

inline std::size_t padded(std::size_t c) { return (c + kLanes - 1) / kLanes * kLanes; }

// Packed per-node table: `ncc` control columns of length Cp, then `nsc`
// scenario columns, each S blocks of length Cp. Weights come in (plus, minus)
// pairs; a column entry is multiplied by plus when >= 0 and by minus otherwise.
struct PackedView {
  const double* table;
  std::size_t C, Cp, S;
  const double* control_w;
  std::size_t ncc;
  const double* scenario_w;
  std::size_t nsc;
  double offset;
};

using v4 = double __attribute__((vector_size(32)));
using v4u = double __attribute__((vector_size(32), aligned(8)));

// (v0, v1) += col[0..8) * (col >= 0 ? wp : wm)
#define RCTL_ACCUMULATE(col, wp, wm, v0, v1)                             \
  do {                                                                   \
    const v4 a0_ = *reinterpret_cast<const v4u*>(col);                   \
    const v4 a1_ = *reinterpret_cast<const v4u*>((col) + 4);             \
    if ((wp) == (wm)) {                                                  \
      v0 += a0_ * (wp);                                                  \
      v1 += a1_ * (wp);                                                  \
    } else {                                                             \
      const v4 p_ = v4{} + (wp), m_ = v4{} + (wm);                       \
      v0 += a0_ * (a0_ >= 0.0 ? p_ : m_);                                \
      v1 += a1_ * (a1_ >= 0.0 ? p_ : m_);                                \
    }                                                                    \
  } while (0)

// Linear part for every (scenario, control): out[s * Cp + c].
void linear_part(const PackedView& t, double* out) {
  const double* scen = t.table + t.ncc * t.Cp;
  for (std::size_t c0 = 0; c0 < t.Cp; c0 += kLanes) {
    v4 pc0 = v4{} + t.offset, pc1 = pc0;
    for (std::size_t k = 0; k < t.ncc; ++k) {
      RCTL_ACCUMULATE(t.table + k * t.Cp + c0, t.control_w[2 * k], t.control_w[2 * k + 1], pc0, pc1);
    }
    for (std::size_t s = 0; s < t.S; ++s) {
      v4 v0 = pc0, v1 = pc1;
      for (std::size_t k = 0; k < t.nsc; ++k) {
        RCTL_ACCUMULATE(scen + (k * t.S + s) * t.Cp + c0, t.scenario_w[2 * k], t.scenario_w[2 * k + 1], v0, v1);
      }
      *reinterpret_cast<v4u*>(out + s * t.Cp + c0) = v0;
      *reinterpret_cast<v4u*>(out + s * t.Cp + c0 + 4) = v1;
    }
  }
}

// Min over controls of the max over scenarios of the linear part, fused so
// the partial sums stay in registers. The lowest control index wins ties.
std::size_t fused_min_max(const PackedView& t,
                                                                                     double* best_out) {
  double best = kInf;
  std::size_t arg = 0;
  const double* scen = t.table + t.ncc * t.Cp;
  const v4 neg_inf = v4{} - kInf;
  for (std::size_t c0 = 0; c0 < t.Cp; c0 += kLanes) {
    v4 pc0 = v4{} + t.offset, pc1 = pc0;
    for (std::size_t k = 0; k < t.ncc; ++k) {
      RCTL_ACCUMULATE(t.table + k * t.Cp + c0, t.control_w[2 * k], t.control_w[2 * k + 1], pc0, pc1);
    }
    v4 w0 = neg_inf, w1 = neg_inf;
    for (std::size_t s = 0; s < t.S; ++s) {
      v4 v0 = pc0, v1 = pc1;
      for (std::size_t k = 0; k < t.nsc; ++k) {
        RCTL_ACCUMULATE(scen + (k * t.S + s) * t.Cp + c0, t.scenario_w[2 * k], t.scenario_w[2 * k + 1], v0, v1);
      }
      w0 = v0 > w0 ? v0 : w0;
      w1 = v1 > w1 ? v1 : w1;
    }
    alignas(32) double worst[kLanes];
    *reinterpret_cast<v4*>(worst) = w0;
    *reinterpret_cast<v4*>(worst + 4) = w1;
    const std::size_t lanes = std::min(kLanes, t.C - c0);
    for (std::size_t l = 0; l < lanes; ++l) {
      if (worst[l] < best) {
        best = worst[l];
        arg = c0 + l;
      }
    }
  }
  *best_out = best;
  return arg;
}

#undef RCTL_ACCUMULATE

}  // namespace

HjbiOperator::HjbiOperator(const ProblemSpec& spec, const Grid& grid, int threads)
    : cp_(spec), grid_(grid), n_(spec.n), d_(spec.d), pool_(threads) {
  if (grid.dimension() != spec.n) throw ValidationError("grid dimension must equal the state dimension n");
  if (n_ > 3) throw ValidationError("grids are limited to n <= 3");
  lattice_ = spec.controls.lattice();
  scenarios_ = spec.gamma.extreme_points();
  width_ = static_cast<std::size_t>(2 * n_ + pair_count(n_) + 2);

  auto names = spec.all_names();
  auto f_split = split_affine(spec.f, "y");
  fast_ = f_split.has_value();
  for (int k = 0; k < d_ && fast_; ++k) fast_ = !spec.f.depends_on("z" + std::to_string(k + 1));
  if (fast_) {
    f_parts_.emplace_back(f_split->intercept, names);
    f_parts_.emplace_back(f_split->slope, names);
    for (int i = 0; i < d_ && fast_; ++i) {
      for (int j = 0; j < d_ && fast_; ++j) {
        const Expression& gij = spec.g[i][j];
        for (int k = 0; k < d_ && fast_; ++k) fast_ = !gij.depends_on("z" + std::to_string(k + 1));
        auto split = split_affine(gij, "y");
        if (!split) {
          fast_ = false;
          break;
        }
        g_parts_.emplace_back(split->intercept, names);
        g_parts_.emplace_back(split->slope, names);
      }
    }
  }
  if (!fast_) {
    f_parts_.clear();
    g_parts_.clear();
  }
  build_tables();
}

HjbiOperator::~HjbiOperator() = default;

void HjbiOperator::fill_rows(const std::vector<double>& x, const std::vector<double>& u, double* rows,
                             double* sigma, double* rate, bool check_cross) const {
  std::vector<double> slots(cp_.slot_count(), 0.0);
  cp_.fill(slots, x, u);
  Eigen::VectorXd b(n_);
  for (int k = 0; k < n_; ++k) b[k] = cp_.b(k)(slots);
  Eigen::MatrixXd sig(n_, d_);
  for (int i = 0; i < n_; ++i) {
    for (int k = 0; k < d_; ++k) sig(i, k) = cp_.sigma(i, k)(slots);
  }
  std::vector<Eigen::VectorXd> h;
  if (cp_.has_h()) {
    for (int i = 0; i < d_; ++i) {
      for (int j = 0; j < d_; ++j) {
        Eigen::VectorXd hij(n_);
        for (int k = 0; k < n_; ++k) hij[k] = cp_.h(i, j, k)(slots);
        h.push_back(hij);
      }
    }
  }
  double f0 = 0.0, f1 = 0.0;
  Eigen::MatrixXd g0 = Eigen::MatrixXd::Zero(d_, d_), g1 = g0;
  if (fast_) {
    for (int i = 0; i < d_; ++i) {
      for (int j = 0; j < d_; ++j) {
        g0(i, j) = g_parts_[2 * (i * d_ + j)](slots);
        g1(i, j) = g_parts_[2 * (i * d_ + j) + 1](slots);
      }
    }
    f0 = f_parts_[0](slots);
    f1 = f_parts_[1](slots);
  }
  if (sigma != nullptr) {
    for (int i = 0; i < n_; ++i) {
      for (int k = 0; k < d_; ++k) sigma[i * d_ + k] = sig(i, k);
    }
  }

  const int P = pair_count(n_);
  std::vector<double> max_drift(n_, 0.0);
  double max_gslope = 0.0;
  for (std::size_t s = 0; s < scenarios_.size(); ++s) {
    const Eigen::MatrixXd& q = scenarios_[s];
    double* row = rows + s * width_;
    Eigen::MatrixXd a = sig * q * sig.transpose();
    a = 0.5 * (a + a.transpose());
    for (int k = 0; k < n_; ++k) row[k] = 0.5 * a(k, k);
    int pair = 0;
    for (int k = 0; k < n_; ++k) {
      for (int l = k + 1; l < n_; ++l, ++pair) row[n_ + pair] = a(k, l);
    }
    if (check_cross) {
      for (int k = 0; k < n_; ++k) {
        const double hk = grid_.axis(k).spacing();
        const double diag = a(k, k) / (hk * hk);
        double off = 0.0;
        for (int l = 0; l < n_; ++l) {
          if (l != k) off += std::fabs(a(k, l)) / (hk * grid_.axis(l).spacing());
        }
        if (diag - off < -1e-12 * std::max(1.0, diag)) {
          throw SchemeError("cross-derivative stencil is not monotone at x = " + describe_point(x) +
                            ", u = " + describe_point(u) + ", axis " + std::to_string(k + 1) +
                            ": diffusion is not diagonally dominant on this grid");
        }
      }
    }
    Eigen::VectorXd drift = b;
    if (!h.empty()) {
      for (int i = 0; i < d_; ++i) {
        for (int j = 0; j < d_; ++j) drift += q(i, j) * h[i * d_ + j];
      }
    }
    for (int k = 0; k < n_; ++k) {
      row[n_ + P + k] = drift[k];
      max_drift[k] = std::max(max_drift[k], std::fabs(drift[k]));
    }
    const double gq1 = fast_ ? q.cwiseProduct(g1).sum() : 0.0;
    row[2 * n_ + P] = fast_ ? q.cwiseProduct(g0).sum() + f0 : 0.0;
    row[2 * n_ + P + 1] = fast_ ? gq1 + f1 : 0.0;
    max_gslope = std::max(max_gslope, std::fabs(gq1));
  }

  const auto& gamma = cp_.spec().gamma;
  Eigen::MatrixXd sst = sig * sig.transpose();
  double r = 0.0;
  for (int k = 0; k < n_; ++k) {
    const double hk = grid_.axis(k).spacing();
    r += max_drift[k] / hk + gamma.sigma_hi2 * static_cast<double>(n_) * std::fabs(sst(k, k)) / (hk * hk);
  }
  if (fast_) r += std::fabs(f1) + max_gslope;
  *rate = r;
}

void HjbiOperator::build_tables() {
  const std::size_t N = grid_.size();
  const std::size_t C = lattice_.size();
  const std::size_t S = scenarios_.size();
  const std::size_t W = width_;
  const std::size_t total = N * C * S * W;
  if (total > (std::size_t{1} << 27)) {
    throw ValidationError("coefficient table too large (" + std::to_string(total) +
                          " doubles); use a coarser grid or control lattice");
  }
  std::vector<double> raw(total, 0.0);  // (node, control, scenario, column)
  rate_.assign(N * C, 0.0);
  if (!fast_) sigma_.assign(N * C * static_cast<std::size_t>(n_ * d_), 0.0);
  boundary_.assign(N, 0u);

  for (std::size_t node = 0; node < N; ++node) {
    unsigned flags = 0;
    for (int k = 0; k < n_; ++k) {
      int i = grid_.index_along(node, k);
      if (i == 0) flags |= 1u << (2 * k);
      if (i == grid_.axis(k).count - 1) flags |= 1u << (2 * k + 1);
    }
    boundary_[node] = flags;
  }

  pool_.run(N, [&](std::size_t begin, std::size_t end) {
    for (std::size_t node = begin; node < end; ++node) {
      const auto x = grid_.point(node);
      const bool cross = n_ >= 2 && boundary_[node] == 0;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t nc = node * C + c;
        fill_rows(x, lattice_[c], &raw[nc * S * W],
                  fast_ ? nullptr : &sigma_[nc * static_cast<std::size_t>(n_ * d_)], &rate_[nc], cross);
      }
    }
  });
  max_rate_ = 0.0;
  for (double r : rate_) max_rate_ = std::max(max_rate_, r);

  // Columns that are the same everywhere are folded into scalars, and columns
  // that do not vary with the scenario are stored once per control. This
  // keeps the per-step table small enough to stay in cache.
  constant_cols_.clear();
  control_cols_.clear();
  scenario_cols_.clear();
  for (std::size_t j = 0; j < W; ++j) {
    const double first = raw[j];
    bool constant = true, per_control = true;
    for (std::size_t r = 0; r < N * C * S && (constant || per_control); ++r) {
      const double v = raw[r * W + j];
      if (v != first) constant = false;
      if (r % S != 0 && v != raw[(r - r % S) * W + j]) per_control = false;
    }
    if (constant) {
      if (first != 0.0) constant_cols_.emplace_back(j, first);
    } else if (per_control) {
      control_cols_.push_back(j);
    } else {
      scenario_cols_.push_back(j);
    }
  }
  const std::size_t Cp = padded(C);
  node_block_ = control_cols_.size() * Cp + scenario_cols_.size() * S * Cp;
  packed_.assign(N * node_block_, 0.0);
  for (std::size_t node = 0; node < N; ++node) {
    double* out = &packed_[node * node_block_];
    for (std::size_t j : control_cols_) {
      for (std::size_t c = 0; c < C; ++c) out[c] = raw[((node * C + c) * S) * W + j];
      out += Cp;
    }
    for (std::size_t j : scenario_cols_) {
      for (std::size_t sc = 0; sc < S; ++sc) {
        for (std::size_t c = 0; c < C; ++c) out[c] = raw[((node * C + c) * S + sc) * W + j];
        out += Cp;
      }
    }
  }
}

HjbiOperator::Stencil HjbiOperator::stencil(std::size_t node, std::span<const double> v) const {
  Stencil st;
  const double v0 = v[node];
  st.v0 = v0;
  const unsigned flags = boundary_[node];
  std::array<double, 3> vp{}, vm{};
  for (int k = 0; k < n_; ++k) {
    const double h = grid_.axis(k).spacing();
    const std::size_t s = grid_.stride(k);
    const bool lo = flags & (1u << (2 * k));
    const bool hi = flags & (1u << (2 * k + 1));
    if (!lo && !hi) {
      vp[k] = v[node + s];
      vm[k] = v[node - s];
      st.fwd[k] = (vp[k] - v0) / h;
      st.bwd[k] = (v0 - vm[k]) / h;
      st.d2[k] = (vp[k] - 2.0 * v0 + vm[k]) / (h * h);
      st.dc[k] = (vp[k] - vm[k]) / (2.0 * h);
    } else {
      st.fwd[k] = st.bwd[k] = st.dc[k] = lo ? (v[node + s] - v0) / h : (v0 - v[node - s]) / h;
      st.d2[k] = 0.0;
    }
  }
  if (n_ >= 2 && flags == 0) {
    int pair = 0;
    for (int k = 0; k < n_; ++k) {
      for (int l = k + 1; l < n_; ++l, ++pair) {
        const std::size_t sk = grid_.stride(k), sl = grid_.stride(l);
        const double denom = 2.0 * grid_.axis(k).spacing() * grid_.axis(l).spacing();
        const double base = 2.0 * v0 - vp[k] - vm[k] - vp[l] - vm[l];
        st.sp[pair] = (v[node + sk + sl] + v[node - sk - sl] + base) / denom;
        st.sm[pair] = -(v[node + sk - sl] + v[node - sk + sl] + base) / denom;
      }
    }
  }
  return st;
}

// Weights of column j: (plus, minus) with plus == minus for plain columns.
std::pair<double, double> HjbiOperator::weights(std::size_t j, const Stencil& st) const {
  const auto n = static_cast<std::size_t>(n_);
  const auto P = static_cast<std::size_t>(pair_count(n_));
  if (j < n) return {st.d2[j], st.d2[j]};
  if (j < n + P) return {st.sp[j - n], st.sm[j - n]};
  if (j < 2 * n + P) return {st.fwd[j - n - P], st.bwd[j - n - P]};
  if (j == 2 * n + P) return {1.0, 1.0};
  return {st.v0, st.v0};
}

double HjbiOperator::row_value(const double* row, const Stencil& st) const {
  double val = 0.0;
  for (std::size_t j = 0; j < width_; ++j) {
    const auto [wp, wm] = weights(j, st);
    val += row[j] * (row[j] >= 0.0 ? wp : wm);
  }
  return val;
}

void HjbiOperator::sweep(std::span<const double> values, std::size_t begin, std::size_t end, double* out,
                         std::size_t* argmin) const {
  const std::size_t C = lattice_.size();
  const std::size_t Cp = padded(C);
  const std::size_t S = scenarios_.size();
  const std::size_t nd = static_cast<std::size_t>(n_ * d_);
  std::vector<double> cw(2 * control_cols_.size()), sw(2 * scenario_cols_.size());
  std::vector<double> acc(fast_ ? 0 : S * Cp), slots(cp_.slot_count()), z(d_);
  PackedView view{nullptr, C, Cp, S, cw.data(), control_cols_.size(), sw.data(), scenario_cols_.size(), 0.0};
  for (std::size_t node = begin; node < end; ++node) {
    const Stencil st = stencil(node, values);
    view.offset = 0.0;
    for (const auto& [j, v] : constant_cols_) {
      const auto [wp, wm] = weights(j, st);
      view.offset += v * (v >= 0.0 ? wp : wm);
    }
    for (std::size_t k = 0; k < control_cols_.size(); ++k) {
      std::tie(cw[2 * k], cw[2 * k + 1]) = weights(control_cols_[k], st);
    }
    for (std::size_t k = 0; k < scenario_cols_.size(); ++k) {
      std::tie(sw[2 * k], sw[2 * k + 1]) = weights(scenario_cols_[k], st);
    }
    view.table = &packed_[node * node_block_];
    if (fast_) {
      double best = 0.0;
      argmin[node] = fused_min_max(view, &best);
      out[node] = best;
      continue;
    }
    // f and g are not affine in y (or read z): evaluate them per control.
    linear_part(view, acc.data());
    const auto x = grid_.point(node);
    double best = kInf;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const double* sig = &sigma_[(node * C + c) * nd];
      for (int k = 0; k < d_; ++k) {
        z[k] = 0.0;
        for (int i = 0; i < n_; ++i) z[k] += st.dc[i] * sig[i * d_ + k];
      }
      cp_.fill(slots, x, lattice_[c], st.v0, z);
      const double fval = cp_.f()(slots);
      Eigen::MatrixXd gv = Eigen::MatrixXd::Zero(d_, d_);
      if (cp_.has_g()) {
        for (int i = 0; i < d_; ++i) {
          for (int j = 0; j < d_; ++j) gv(i, j) = cp_.g(i, j)(slots);
        }
      }
      double worst = -kInf;
      for (std::size_t s = 0; s < S; ++s) {
        double val = acc[s * Cp + c];
        if (cp_.has_g()) val += scenarios_[s].cwiseProduct(gv).sum();
        worst = std::max(worst, val + fval);
      }
      if (worst < best) {
        best = worst;
        arg = c;
      }
    }
    out[node] = best;
    argmin[node] = arg;
  }
}

void HjbiOperator::hamiltonian(std::span<const double> values, std::span<double> out,
                               std::span<std::size_t> argmin) const {
  if (values.size() != grid_.size() || out.size() != grid_.size() || argmin.size() != grid_.size()) {
    throw ValidationError("field size does not match the grid");
  }
  pool_.run(grid_.size(), [&](std::size_t begin, std::size_t end) {
    sweep(values, begin, end, out.data(), argmin.data());
  });
}

void HjbiOperator::step(std::span<const double> values, double dt, std::span<double> out,
                        std::span<std::size_t> argmin) const {
  hamiltonian(values, out, argmin);
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] + dt * out[i];
}

double HjbiOperator::integrand(std::size_t node, const std::vector<double>& u,
                               std::span<const double> values) const {
  const auto x = grid_.point(node);
  std::vector<double> rows(scenarios_.size() * width_);
  std::vector<double> sig(static_cast<std::size_t>(n_ * d_));
  double rate = 0.0;
  fill_rows(x, u, rows.data(), sig.data(), &rate, false);
  const Stencil st = stencil(node, values);
  double fval = 0.0;
  Eigen::MatrixXd gv = Eigen::MatrixXd::Zero(d_, d_);
  if (!fast_) {
    std::vector<double> z(d_, 0.0), slots(cp_.slot_count());
    for (int k = 0; k < d_; ++k) {
      for (int i = 0; i < n_; ++i) z[k] += st.dc[i] * sig[i * d_ + k];
    }
    cp_.fill(slots, x, u, st.v0, z);
    fval = cp_.f()(slots);
    if (cp_.has_g()) {
      for (int i = 0; i < d_; ++i) {
        for (int j = 0; j < d_; ++j) gv(i, j) = cp_.g(i, j)(slots);
      }
    }
  }
  double worst = -kInf;
  for (std::size_t s = 0; s < scenarios_.size(); ++s) {
    double val = row_value(&rows[s * width_], st);
    if (!fast_ && cp_.has_g()) val += scenarios_[s].cwiseProduct(gv).sum();
    worst = std::max(worst, val);
  }
  return worst + fval;
}

double HjbiOperator::max_stable_dt(std::span<const double> values) const {
  double worst = max_rate_;
  if (!fast_) {
    // Nonlinear running costs: add a difference-quotient estimate of the
    // y-sensitivity at the current values.
    const std::size_t C = lattice_.size();
    const std::size_t nd = static_cast<std::size_t>(n_ * d_);
    std::vector<double> slots(cp_.slot_count());
    for (std::size_t node = 0; node < grid_.size(); ++node) {
      const Stencil st = stencil(node, values);
      const auto x = grid_.point(node);
      const double delta = 1e-6 * (1.0 + std::fabs(st.v0));
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t nc = node * C + c;
        std::vector<double> z(d_, 0.0);
        for (int k = 0; k < d_; ++k) {
          for (int i = 0; i < n_; ++i) z[k] += st.dc[i] * sigma_[nc * nd + i * d_ + k];
        }
        cp_.fill(slots, x, lattice_[c], st.v0 + delta, z);
        const double fp = cp_.f()(slots);
        Eigen::MatrixXd gp = Eigen::MatrixXd::Zero(d_, d_), gm = gp;
        for (int i = 0; i < d_ && cp_.has_g(); ++i) {
          for (int j = 0; j < d_; ++j) gp(i, j) = cp_.g(i, j)(slots);
        }
        cp_.fill(slots, x, lattice_[c], st.v0 - delta, z);
        const double fm = cp_.f()(slots);
        for (int i = 0; i < d_ && cp_.has_g(); ++i) {
          for (int j = 0; j < d_; ++j) gm(i, j) = cp_.g(i, j)(slots);
        }
        double gslope = 0.0;
        for (const auto& q : scenarios_) {
          gslope = std::max(gslope, std::fabs(q.cwiseProduct(gp - gm).sum()) / (2.0 * delta));
        }
        worst = std::max(worst, rate_[nc] + std::fabs(fp - fm) / (2.0 * delta) + gslope);
      }
    }
  }
  return worst > 0.0 ? kCflSafety / worst : kInf;
}

// ------------------------------------------------------------ flows

double default_dt(const HjbiOperator& op, std::span<const double> values) {
  const double bound = op.max_stable_dt(values);
  if (!std::isfinite(bound) || bound >= 1.0) return 1.0;
  return 1.0 / std::ceil(1.0 / bound);
}

namespace {

void require_grid(const ProblemSpec& spec, const ValueField& field) {
  field.validate();
  if (field.grid.dimension() != spec.n) throw ValidationError("field grid dimension must equal n");
}

void check_dt(const HjbiOperator& op, std::span<const double> values, double dt) {
  if (!(dt > 0.0)) throw ValidationError("dt must be positive");
  const double bound = op.max_stable_dt(values);
  if (dt > bound * (1.0 + 1e-12)) throw CflError(dt, bound);
}

std::size_t steps_for(double s, double dt) {
  if (!(s > 0.0)) throw ValidationError("window length s must be positive");
  const double ratio = s / dt;
  const double k = std::round(ratio);
  if (k < 1.0 || std::fabs(ratio - k) > 1e-9 * std::max(1.0, ratio)) {
    throw ValidationError("dt must divide the window length s");
  }
  return static_cast<std::size_t>(k);
}

double interior_sup_diff(const Grid& grid, std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t node : grid.interior_nodes()) worst = std::max(worst, std::fabs(a[node] - b[node]));
  return worst;
}

ValueField run_flow(const HjbiOperator& op, const ValueField& terminal, double dt, std::size_t steps) {
  std::vector<double> cur = terminal.values, next(cur.size());
  std::vector<std::size_t> arg(cur.size(), 0);
  for (std::size_t k = 0; k < steps; ++k) {
    op.step(cur, dt, next, arg);
    cur.swap(next);
  }
  ValueField out(terminal.grid, std::move(cur));
  if (steps > 0) out.policy = std::move(arg);
  return out;
}

}  // namespace

ValueField parabolic_step(const ProblemSpec& spec, const ValueField& field, double dt) {
  require_grid(spec, field);
  HjbiOperator op(spec, field.grid);
  check_dt(op, field.values, dt);
  return run_flow(op, field, dt, 1);
}

ValueField backward_semigroup(const ProblemSpec& spec, double s, const ValueField& terminal, double dt,
                              int threads) {
  require_grid(spec, terminal);
  const std::size_t steps = steps_for(s, dt);
  HjbiOperator op(spec, terminal.grid, threads);
  check_dt(op, terminal.values, dt);
  return run_flow(op, terminal, dt, steps);
}

namespace {

double resolve_mu(const ProblemSpec& spec, const Grid& grid, const SolveOptions& options) {
  if (options.mu) return *options.mu;
  if (spec.mu) return *spec.mu;
  SampleBox box;
  for (const auto& a : grid.axes()) {
    box.x_lower.push_back(a.lower);
    box.x_upper.push_back(a.upper);
  }
  return check_assumptions(spec, box, 2000, 0).mu_hat;
}

double fit_rate(const std::vector<double>& history) {
  // Least-squares slope of log(change) against window index, after a
  // two-window burn-in.
  std::vector<std::pair<double, double>> pts;
  const std::size_t burn = history.size() > 3 ? 2 : 0;
  for (std::size_t k = burn; k < history.size(); ++k) {
    if (history[k] > 0.0) pts.emplace_back(static_cast<double>(k + 1), std::log(history[k]));
  }
  if (pts.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double mt = 0.0, ml = 0.0;
  for (auto [t, l] : pts) {
    mt += t;
    ml += l;
  }
  mt /= static_cast<double>(pts.size());
  ml /= static_cast<double>(pts.size());
  double num = 0.0, den = 0.0;
  for (auto [t, l] : pts) {
    num += (t - mt) * (l - ml);
    den += (t - mt) * (t - mt);
  }
  return -num / den;
}

ValueField initial_field(const Grid& grid, const std::optional<ValueField>& initial) {
  if (!initial) return ValueField(grid, std::vector<double>(grid.size(), 0.0));
  if (!(initial->grid == grid)) throw ValidationError("initial field lives on a different grid");
  initial->validate();
  return *initial;
}

}  // namespace

SolveResult solve_elliptic(const ProblemSpec& spec, const Grid& grid, double tol,
                           const std::optional<ValueField>& initial, const SolveOptions& options) {
  if (!(tol > 0.0)) throw ValidationError("tol must be positive");
  HjbiOperator op(spec, grid, options.threads);
  ValueField field = initial_field(grid, initial);

  SolveReport report;
  report.mu = resolve_mu(spec, grid, options);
  double max_horizon = 0.0;
  if (options.max_horizon) {
    max_horizon = *options.max_horizon;
  } else if (report.mu > 0.0) {
    max_horizon = 40.0 / report.mu;
  } else {
    throw ValidationError("mu is not positive; supply mu or a maximum horizon");
  }

  double dt = options.dt ? *options.dt : default_dt(op, field.values);
  check_dt(op, field.values, dt);
  report.dt = dt;
  const auto window = static_cast<std::size_t>(std::max(1.0, std::ceil(1.0 / dt - 1e-9)));

  std::vector<double> cur = field.values, next(cur.size()), start;
  std::vector<std::size_t> arg(cur.size(), 0);
  while (report.horizon < max_horizon - 1e-12) {
    start = cur;
    for (std::size_t k = 0; k < window; ++k) {
      op.step(cur, dt, next, arg);
      cur.swap(next);
    }
    report.iterations += window;
    report.horizon = static_cast<double>(report.iterations) * dt;
    const double change = interior_sup_diff(grid, cur, start);
    if (!std::isfinite(change)) {
      report.diagnostics = "value field became non-finite at horizon " + format_double(report.horizon);
      break;
    }
    report.change_history.push_back(change);
    if (change < tol) {
      report.converged = true;
      break;
    }
    if (!op.fast_path()) {
      const double bound = op.max_stable_dt(cur);
      if (dt > bound * (1.0 + 1e-12)) throw CflError(dt, bound);
    }
  }

  std::vector<double> ham(cur.size());
  op.hamiltonian(cur, ham, arg);
  for (std::size_t node : grid.interior_nodes()) {
    report.residual_norm = std::max(report.residual_norm, std::fabs(ham[node]));
  }
  report.fitted_rate = fit_rate(report.change_history);
  for (std::size_t k = 3; k < report.change_history.size(); ++k) {
    if (report.change_history[k] > 1.1 * report.change_history[k - 1]) report.history_monotone = false;
  }

  field.values = std::move(cur);
  field.policy = std::move(arg);
  if (std::all_of(field.values.begin(), field.values.end(), [](double v) { return std::isfinite(v); })) {
    report.growth_ratio = field.growth_ratio();
    report.growth_ok = report.growth_ratio <= options.growth_budget;
  } else {
    report.growth_ok = false;
  }
  if (!report.converged && report.diagnostics.empty()) {
    std::ostringstream ss;
    ss << "no convergence within horizon " << format_double(max_horizon) << "; last window change "
       << (report.change_history.empty() ? 0.0 : report.change_history.back()) << " vs tol " << tol;
    report.diagnostics = ss.str();
  }
  if (!report.growth_ok) {
    report.diagnostics += (report.diagnostics.empty() ? "" : "; ") +
                          std::string("quadratic growth budget exceeded: ratio ") +
                          format_double(report.growth_ratio);
  }
  return {std::move(field), std::move(report)};
}

std::vector<ValueField> horizon_snapshots(const ProblemSpec& spec, const Grid& grid,
                                          const std::vector<double>& horizons,
                                          const std::optional<ValueField>& initial,
                                          const SolveOptions& options) {
  HjbiOperator op(spec, grid, options.threads);
  ValueField field = initial_field(grid, initial);
  const double dt = options.dt ? *options.dt : default_dt(op, field.values);
  check_dt(op, field.values, dt);
  std::vector<ValueField> out;
  std::vector<double> cur = field.values, next(cur.size());
  std::vector<std::size_t> arg(cur.size(), 0);
  std::size_t done = 0;
  for (double T : horizons) {
    const std::size_t target = steps_for(T, dt);
    if (target < done) throw ValidationError("horizons must be increasing");
    for (; done < target; ++done) {
      op.step(cur, dt, next, arg);
      cur.swap(next);
    }
    ValueField snap(grid, cur);
    snap.policy = arg;
    out.push_back(std::move(snap));
  }
  return out;
}

std::vector<std::size_t> extract_policy(const ProblemSpec& spec, const ValueField& field) {
  require_grid(spec, field);
  HjbiOperator op(spec, field.grid);
  std::vector<double> ham(field.values.size());
  std::vector<std::size_t> arg(field.values.size());
  op.hamiltonian(field.values, ham, arg);
  return arg;
}

double dpp_residual(const ProblemSpec& spec, const ValueField& field, double s, std::optional<double> dt,
                    int threads) {
  require_grid(spec, field);
  if (!(s > 0.0)) throw ValidationError("window length s must be positive");
  HjbiOperator op(spec, field.grid, threads);
  double step = 0.0;
  if (dt) {
    step = *dt;
  } else {
    const double bound = op.max_stable_dt(field.values);
    step = std::isfinite(bound) && bound < s ? s / std::ceil(s / bound) : s;
  }
  check_dt(op, field.values, step);
  ValueField moved = run_flow(op, field, step, steps_for(s, step));
  return interior_sup_diff(field.grid, field.values, moved.values);
}

}  // namespace rctl
