#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rctl {

/// Failure raised while parsing or evaluating a coefficient expression.
class ExpressionError : public std::runtime_error {
 public:
  enum class Kind { Syntax, UnknownIdentifier, DivisionByZero, Domain, MissingBinding };

  ExpressionError(Kind kind, const std::string& what, std::size_t offset = 0)
      : std::runtime_error(what), kind_(kind), offset_(offset) {}

  Kind kind() const noexcept { return kind_; }
  /// Byte offset into the source text (syntax errors only).
  std::size_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

enum class UnaryOp { Neg, Exp, Abs, Sqrt };
enum class BinaryOp { Add, Sub, Mul, Div, Min, Max, Pow };

using Bindings = std::map<std::string, double, std::less<>>;

/// Immutable expression tree over named real variables.
///
/// Nodes are shared, so copies are cheap and safe to use from several threads.
class Expression {
 public:
  enum class Kind { Constant, Variable, Unary, Binary };

  /// The zero constant.
  Expression();

  static Expression constant(double value);
  static Expression variable(std::string name);
  static Expression unary(UnaryOp op, Expression operand);
  static Expression binary(BinaryOp op, Expression lhs, Expression rhs);

  Kind kind() const noexcept;
  double constant_value() const;
  const std::string& variable_name() const;
  UnaryOp unary_op() const;
  BinaryOp binary_op() const;
  /// Operand i (0 for unary nodes, 0/1 for binary nodes).
  const Expression& operand(std::size_t i) const;

  double evaluate(const Bindings& bindings) const;

  /// Canonical text form; parsing it yields a structurally equal tree.
  std::string to_string() const;

  std::set<std::string> variables() const;
  bool depends_on(std::string_view name) const;
  /// True when the tree is literally the constant 0.
  bool is_zero() const;

  /// Structural equality (same node kinds, operators, names and constants).
  friend bool operator==(const Expression& a, const Expression& b);

 private:
  struct Node;
  explicit Expression(std::shared_ptr<const Node> node);
  std::shared_ptr<const Node> node_;
};

Expression parse_expression(std::string_view text, const std::set<std::string>& allowed_vars);

double eval_expression(const Expression& e, const Bindings& bindings);

/// Structural affine decomposition in one variable.
///
/// When the expression is affine in `var` (every occurrence enters through
/// +, -, negation, multiplication by a `var`-free factor or division by a
/// `var`-free denominator), returns {intercept, slope} as `var`-free trees.
struct AffineSplit {
  Expression intercept;
  Expression slope;
};
std::optional<AffineSplit> split_affine(const Expression& e, std::string_view var);

/// Stack-machine form of an Expression with variables resolved to slots.
///
/// Evaluation applies the same domain checks as Expression::evaluate.
class CompiledExpression {
 public:
  CompiledExpression() = default;
  CompiledExpression(const Expression& e, const std::vector<std::string>& slots);

  double operator()(std::span<const double> vars) const;

  /// Evaluates over `count` points at once. `columns[s]` points at the values
  /// of slot s for every point (nullptr for slots the expression never reads).
  /// Division by zero and sqrt of a negative still throw; non-finite results
  /// are passed through so the caller can flag the affected points.
  void evaluate_batch(std::span<const double* const> columns, std::size_t count,
                      double* out) const;

  bool is_constant() const noexcept { return constant_; }
  double constant_value() const noexcept { return value_; }

 private:
  enum class Op : unsigned char {
    Const, Var, Neg, Exp, Abs, Sqrt, Add, Sub, Mul, Div, Min, Max, Pow
  };
  struct Instr {
    Op op;
    std::size_t arg = 0;  // slot for Var, index into consts_ for Const
  };
  void emit(const Expression& e, const std::vector<std::string>& slots);

  std::vector<Instr> code_;
  std::vector<double> consts_;
  std::size_t max_depth_ = 0;
  bool constant_ = true;
  double value_ = 0.0;
};

}  // namespace rctl
