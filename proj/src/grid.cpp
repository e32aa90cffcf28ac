#include "robustctl/grid.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

namespace rctl {

Grid::Grid(std::vector<Axis> axes, double interior_margin) : axes_(std::move(axes)), margin_(interior_margin) {
  if (axes_.empty()) throw ValidationError("grid needs at least one axis");
  if (!(interior_margin >= 0.0 && interior_margin < 0.5)) {
    throw ValidationError("interior margin must lie in [0, 0.5)");
  }
  for (const auto& a : axes_) {
    if (a.count < 3) throw ValidationError("each grid axis needs at least 3 points");
    if (!std::isfinite(a.lower) || !std::isfinite(a.upper) || !(a.upper > a.lower)) {
      throw ValidationError("grid axis has nonpositive extent");
    }
  }
  strides_.assign(axes_.size(), 1);
  size_ = 1;
  for (std::size_t k = axes_.size(); k-- > 0;) {
    strides_[k] = size_;
    size_ *= static_cast<std::size_t>(axes_[k].count);
  }
  // Per-axis interior index ranges.
  std::vector<std::pair<int, int>> range(axes_.size());
  for (std::size_t k = 0; k < axes_.size(); ++k) {
    const Axis& a = axes_[k];
    const double width = a.upper - a.lower;
    const double lo = a.lower + margin_ * width - 1e-9 * width;
    const double hi = a.upper - margin_ * width + 1e-9 * width;
    int first = a.count, last = -1;
    for (int i = 1; i + 1 < a.count; ++i) {
      double c = a.coordinate(i);
      if (c >= lo && c <= hi) {
        first = std::min(first, i);
        last = std::max(last, i);
      }
    }
    range[k] = {first, last};
  }
  interior_mask_.assign(size_, 0);
  for (std::size_t node = 0; node < size_; ++node) {
    bool inside = true;
    for (std::size_t k = 0; k < axes_.size() && inside; ++k) {
      int i = index_along(node, static_cast<int>(k));
      inside = i >= range[k].first && i <= range[k].second;
    }
    if (inside) {
      interior_mask_[node] = 1;
      interior_.push_back(node);
    }
  }
}

std::vector<double> Grid::point(std::size_t node) const {
  std::vector<double> x(axes_.size());
  for (int k = 0; k < dimension(); ++k) x[k] = coordinate(node, k);
  return x;
}

std::size_t Grid::nearest_node(std::span<const double> x) const {
  std::size_t node = 0;
  for (int k = 0; k < dimension(); ++k) {
    const Axis& a = axes_[k];
    double t = std::round((x[k] - a.lower) / a.spacing());
    t = std::clamp(t, 0.0, static_cast<double>(a.count - 1));
    node += static_cast<std::size_t>(t) * strides_[k];
  }
  return node;
}

bool operator==(const Grid& a, const Grid& b) {
  if (a.axes_.size() != b.axes_.size() || a.margin_ != b.margin_) return false;
  for (std::size_t k = 0; k < a.axes_.size(); ++k) {
    if (a.axes_[k].lower != b.axes_[k].lower || a.axes_[k].upper != b.axes_[k].upper ||
        a.axes_[k].count != b.axes_[k].count) {
      return false;
    }
  }
  return true;
}

Grid build_grid(const std::vector<std::pair<double, double>>& bounds, const std::vector<int>& counts,
                double interior_margin) {
  if (bounds.size() != counts.size()) throw ValidationError("grid bounds and counts differ in length");
  std::vector<Axis> axes;
  for (std::size_t k = 0; k < bounds.size(); ++k) axes.push_back({bounds[k].first, bounds[k].second, counts[k]});
  return Grid(std::move(axes), interior_margin);
}

void ValueField::validate() const {
  if (values.size() != grid.size()) throw ValidationError("value array length differs from node count");
  for (double v : values) {
    if (!std::isfinite(v)) throw ValidationError("value field holds a non-finite value");
  }
  if (policy && policy->size() != grid.size()) throw ValidationError("policy array length differs from node count");
}

double ValueField::growth_ratio() const {
  double worst = 0.0;
  for (std::size_t node = 0; node < grid.size(); ++node) {
    double r2 = 0.0;
    for (int k = 0; k < grid.dimension(); ++k) {
      double c = grid.coordinate(node, k);
      r2 += c * c;
    }
    worst = std::max(worst, std::fabs(values[node]) / (1.0 + r2));
  }
  return worst;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_value_csv(std::ostream& out, const ValueField& field, const ControlSet& controls) {
  field.validate();
  const int n = field.grid.dimension();
  const std::size_t m = controls.dimension();
  for (int k = 0; k < n; ++k) out << 'x' << (k + 1) << ',';
  out << "value";
  for (std::size_t j = 0; j < m; ++j) out << ",policy_u" << (j + 1);
  out << '\n';
  for (std::size_t node = 0; node < field.grid.size(); ++node) {
    for (int k = 0; k < n; ++k) out << format_double(field.grid.coordinate(node, k)) << ',';
    out << format_double(field.values[node]);
    if (field.policy) {
      auto u = controls.lattice_point((*field.policy)[node]);
      for (double uj : u) out << ',' << format_double(uj);
    } else {
      for (std::size_t j = 0; j < m; ++j) out << ',';
    }
    out << '\n';
  }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_cell(const std::string& s, std::size_t line) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ValidationError("value CSV line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace

ValueField read_value_csv(std::istream& in, const ControlSet& controls, double interior_margin) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("value CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_csv(line);
  int n = 0;
  while (n < static_cast<int>(header.size()) && header[n] == "x" + std::to_string(n + 1)) ++n;
  if (n == 0 || n >= static_cast<int>(header.size()) || header[n] != "value") {
    throw ValidationError("value CSV header must be x1,...,xn,value,policy_u1,...");
  }
  const std::size_t m = header.size() - n - 1;
  for (std::size_t j = 0; j < m; ++j) {
    if (header[n + 1 + j] != "policy_u" + std::to_string(j + 1)) {
      throw ValidationError("value CSV header: unexpected column '" + header[n + 1 + j] + "'");
    }
  }
  if (m != controls.dimension()) throw ValidationError("value CSV policy columns do not match the control dimension");

  std::vector<std::vector<double>> coords;
  std::vector<double> values;
  std::vector<std::size_t> policy;
  bool has_policy = true;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw ValidationError("value CSV line " + std::to_string(lineno) + ": wrong column count");
    }
    std::vector<double> x(n);
    for (int k = 0; k < n; ++k) x[k] = parse_cell(cells[k], lineno);
    coords.push_back(std::move(x));
    values.push_back(parse_cell(cells[n], lineno));
    if (m > 0 && !cells[n + 1].empty()) {
      std::vector<double> u(m);
      for (std::size_t j = 0; j < m; ++j) u[j] = parse_cell(cells[n + 1 + j], lineno);
      policy.push_back(controls.nearest_index(u));
    } else {
      has_policy = false;
    }
  }
  if (values.empty()) throw ValidationError("value CSV has no rows");

  // Recover the axes from the row-major layout.
  std::vector<Axis> axes(n);
  std::size_t stride = 1;
  for (int k = n; k-- > 0;) {
    int count = 1;
    while (stride * count < coords.size() && coords[stride * count][k] != coords[0][k]) ++count;
    axes[k] = {coords[0][k], coords[stride * (count - 1)][k], count};
    stride *= static_cast<std::size_t>(count);
  }
  ValueField field(Grid(axes, interior_margin), std::move(values));
  if (field.grid.size() != field.values.size()) throw ValidationError("value CSV rows do not form a full grid");
  for (std::size_t node = 0; node < field.grid.size(); ++node) {
    for (int k = 0; k < n; ++k) {
      double expect = field.grid.coordinate(node, k);
      if (std::fabs(expect - coords[node][k]) > 1e-9 * (1.0 + std::fabs(expect))) {
        throw ValidationError("value CSV rows are not a uniform row-major grid");
      }
    }
  }
  if (has_policy && m > 0) field.policy = std::move(policy);
  field.validate();
  return field;
}

}  // namespace rctl
