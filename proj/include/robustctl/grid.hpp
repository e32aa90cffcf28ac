#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "robustctl/problem.hpp"

namespace rctl {

struct Axis {
  double lower = 0.0;
  double upper = 1.0;
  int count = 3;

  double spacing() const { return (upper - lower) / static_cast<double>(count - 1); }
  /// Node coordinate; the last node sits exactly on `upper`.
  double coordinate(int i) const {
    return i == count - 1 ? upper : lower + static_cast<double>(i) * spacing();
  }
};

/// Uniform tensor grid over a box in R^n, nodes in row-major order (last axis
/// fastest). Nodes whose coordinates lie in the innermost (1 - 2*margin)
/// fraction of every axis form the trusted interior subgrid.
class Grid {
 public:
  Grid() = default;
  explicit Grid(std::vector<Axis> axes, double interior_margin = 0.2);

  int dimension() const { return static_cast<int>(axes_.size()); }
  std::size_t size() const { return size_; }
  const Axis& axis(int k) const { return axes_[k]; }
  const std::vector<Axis>& axes() const { return axes_; }
  double margin() const { return margin_; }
  std::size_t stride(int k) const { return strides_[k]; }

  int index_along(std::size_t node, int k) const {
    return static_cast<int>((node / strides_[k]) % static_cast<std::size_t>(axes_[k].count));
  }
  std::vector<double> point(std::size_t node) const;
  double coordinate(std::size_t node, int k) const { return axes_[k].coordinate(index_along(node, k)); }

  bool is_interior(std::size_t node) const { return interior_mask_[node] != 0; }
  const std::vector<std::size_t>& interior_nodes() const { return interior_; }
  std::size_t nearest_node(std::span<const double> x) const;

  friend bool operator==(const Grid& a, const Grid& b);

 private:
  std::vector<Axis> axes_;
  std::vector<std::size_t> strides_;
  std::size_t size_ = 0;
  double margin_ = 0.2;
  std::vector<char> interior_mask_;
  std::vector<std::size_t> interior_;
};

Grid build_grid(const std::vector<std::pair<double, double>>& bounds, const std::vector<int>& counts,
                double interior_margin = 0.2);

/// Values of a function on a Grid, optionally with a control-lattice index per node.
struct ValueField {
  Grid grid;
  std::vector<double> values;
  std::optional<std::vector<std::size_t>> policy;

  ValueField() = default;
  ValueField(Grid g, std::vector<double> v) : grid(std::move(g)), values(std::move(v)) {}

  /// Throws ValidationError unless the value array matches the grid and is finite.
  void validate() const;

  /// max over nodes of |value| / (1 + |x|^2).
  double growth_ratio() const;
};

/// CSV with header "x1,...,xn,value,policy_u1,...,policy_um". Policy columns
/// hold lattice coordinates and are left empty when the field has no policy.
void write_value_csv(std::ostream& out, const ValueField& field, const ControlSet& controls);

/// Reads a CSV written by write_value_csv. Policy values are mapped back to the
/// nearest lattice index of `controls`.
ValueField read_value_csv(std::istream& in, const ControlSet& controls, double interior_margin = 0.2);

std::string format_double(double v);

}  // namespace rctl
