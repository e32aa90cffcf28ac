#include "robustctl/expression.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>

namespace rctl {

struct Expression::Node {
  Kind kind = Kind::Constant;
  double value = 0.0;
  std::string name;
  UnaryOp uop = UnaryOp::Neg;
  BinaryOp bop = BinaryOp::Add;
  std::vector<Expression> operands;
};

Expression::Expression() : Expression(constant(0.0)) {}

Expression::Expression(std::shared_ptr<const Node> node) : node_(std::move(node)) {}

Expression Expression::constant(double value) {
  if (!std::isfinite(value)) {
    throw ExpressionError(ExpressionError::Kind::Domain, "non-finite constant");
  }
  auto n = std::make_shared<Node>();
  n->kind = Kind::Constant;
  n->value = value;
  return Expression(std::move(n));
}

Expression Expression::variable(std::string name) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Variable;
  n->name = std::move(name);
  return Expression(std::move(n));
}

Expression Expression::unary(UnaryOp op, Expression operand) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Unary;
  n->uop = op;
  n->operands.push_back(std::move(operand));
  return Expression(std::move(n));
}

Expression Expression::binary(BinaryOp op, Expression lhs, Expression rhs) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Binary;
  n->bop = op;
  n->operands.push_back(std::move(lhs));
  n->operands.push_back(std::move(rhs));
  return Expression(std::move(n));
}

Expression::Kind Expression::kind() const noexcept { return node_->kind; }

double Expression::constant_value() const {
  if (node_->kind != Kind::Constant) throw std::logic_error("not a constant node");
  return node_->value;
}

const std::string& Expression::variable_name() const {
  if (node_->kind != Kind::Variable) throw std::logic_error("not a variable node");
  return node_->name;
}

UnaryOp Expression::unary_op() const {
  if (node_->kind != Kind::Unary) throw std::logic_error("not a unary node");
  return node_->uop;
}

BinaryOp Expression::binary_op() const {
  if (node_->kind != Kind::Binary) throw std::logic_error("not a binary node");
  return node_->bop;
}

const Expression& Expression::operand(std::size_t i) const { return node_->operands.at(i); }

namespace {

[[noreturn]] void fail(ExpressionError::Kind kind, const std::string& msg) {
  throw ExpressionError(kind, msg);
}

double apply_unary(UnaryOp op, double a) {
  switch (op) {
    case UnaryOp::Neg: return -a;
    case UnaryOp::Exp: return std::exp(a);
    case UnaryOp::Abs: return std::fabs(a);
    case UnaryOp::Sqrt:
      if (a < 0.0) fail(ExpressionError::Kind::Domain, "sqrt of negative value");
      return std::sqrt(a);
  }
  return 0.0;
}

double apply_binary(BinaryOp op, double a, double b) {
  switch (op) {
    case BinaryOp::Add: return a + b;
    case BinaryOp::Sub: return a - b;
    case BinaryOp::Mul: return a * b;
    case BinaryOp::Div:
      if (b == 0.0) fail(ExpressionError::Kind::DivisionByZero, "division by zero");
      return a / b;
    case BinaryOp::Min: return a < b ? a : b;
    case BinaryOp::Max: return a > b ? a : b;
    case BinaryOp::Pow: {
      double r = std::pow(a, b);
      if (std::isnan(r)) fail(ExpressionError::Kind::Domain, "pow outside its domain");
      return r;
    }
  }
  return 0.0;
}

double eval_node(const Expression& e, const Bindings& bindings) {
  switch (e.kind()) {
    case Expression::Kind::Constant: return e.constant_value();
    case Expression::Kind::Variable: {
      auto it = bindings.find(e.variable_name());
      if (it == bindings.end()) {
        fail(ExpressionError::Kind::MissingBinding, "no binding for '" + e.variable_name() + "'");
      }
      return it->second;
    }
    case Expression::Kind::Unary: return apply_unary(e.unary_op(), eval_node(e.operand(0), bindings));
    case Expression::Kind::Binary:
      return apply_binary(e.binary_op(), eval_node(e.operand(0), bindings),
                          eval_node(e.operand(1), bindings));
  }
  return 0.0;
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const char* unary_name(UnaryOp op) {
  switch (op) {
    case UnaryOp::Neg: return "-";
    case UnaryOp::Exp: return "exp";
    case UnaryOp::Abs: return "abs";
    case UnaryOp::Sqrt: return "sqrt";
  }
  return "?";
}

const char* binary_name(BinaryOp op) {
  switch (op) {
    case BinaryOp::Add: return "+";
    case BinaryOp::Sub: return "-";
    case BinaryOp::Mul: return "*";
    case BinaryOp::Div: return "/";
    case BinaryOp::Min: return "min";
    case BinaryOp::Max: return "max";
    case BinaryOp::Pow: return "pow";
  }
  return "?";
}

void print_node(const Expression& e, std::string& out) {
  switch (e.kind()) {
    case Expression::Kind::Constant: {
      double v = e.constant_value();
      // A bare "-<literal>" parses back to a negative constant.
      if (std::signbit(v)) {
        out += "(" + format_number(v) + ")";
      } else {
        out += format_number(v);
      }
      return;
    }
    case Expression::Kind::Variable: out += e.variable_name(); return;
    case Expression::Kind::Unary:
      out += unary_name(e.unary_op());
      out += "(";
      print_node(e.operand(0), out);
      out += ")";
      return;
    case Expression::Kind::Binary: {
      BinaryOp op = e.binary_op();
      if (op == BinaryOp::Min || op == BinaryOp::Max || op == BinaryOp::Pow) {
        out += binary_name(op);
        out += "(";
        print_node(e.operand(0), out);
        out += ", ";
        print_node(e.operand(1), out);
        out += ")";
      } else {
        out += "(";
        print_node(e.operand(0), out);
        out += " ";
        out += binary_name(op);
        out += " ";
        print_node(e.operand(1), out);
        out += ")";
      }
      return;
    }
  }
}

void collect_vars(const Expression& e, std::set<std::string>& out) {
  switch (e.kind()) {
    case Expression::Kind::Constant: return;
    case Expression::Kind::Variable: out.insert(e.variable_name()); return;
    case Expression::Kind::Unary: collect_vars(e.operand(0), out); return;
    case Expression::Kind::Binary:
      collect_vars(e.operand(0), out);
      collect_vars(e.operand(1), out);
      return;
  }
}

// Recursive descent over:
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := '-' unary | power
//   power   := primary ('^' unary)?
//   primary := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
class Parser {
 public:
  Parser(std::string_view text, const std::set<std::string>& allowed)
      : text_(text), allowed_(allowed) {}

  Expression parse() {
    Expression e = parse_expr();
    skip_ws();
    if (pos_ != text_.size()) syntax("unexpected '" + std::string(1, text_[pos_]) + "'");
    return e;
  }

 private:
  [[noreturn]] void syntax(const std::string& msg) const {
    std::string where = pos_ >= text_.size() ? "end of input" : "offset " + std::to_string(pos_);
    throw ExpressionError(ExpressionError::Kind::Syntax, "syntax error at " + where + ": " + msg,
                          pos_);
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!accept(c)) syntax(std::string("expected '") + c + "'");
  }

  bool at_number() {
    skip_ws();
    return pos_ < text_.size() &&
           (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.');
  }

  Expression parse_expr() {
    Expression lhs = parse_term();
    for (;;) {
      if (accept('+')) {
        lhs = Expression::binary(BinaryOp::Add, lhs, parse_term());
      } else if (accept('-')) {
        lhs = Expression::binary(BinaryOp::Sub, lhs, parse_term());
      } else {
        return lhs;
      }
    }
  }

  Expression parse_term() {
    Expression lhs = parse_unary();
    for (;;) {
      if (accept('*')) {
        lhs = Expression::binary(BinaryOp::Mul, lhs, parse_unary());
      } else if (accept('/')) {
        lhs = Expression::binary(BinaryOp::Div, lhs, parse_unary());
      } else {
        return lhs;
      }
    }
  }

  Expression parse_unary() {
    if (accept('-')) {
      if (at_number()) {
        std::size_t save = pos_;
        double v = parse_number();
        skip_ws();
        if (pos_ >= text_.size() || text_[pos_] != '^') return Expression::constant(-v);
        pos_ = save;
      }
      return Expression::unary(UnaryOp::Neg, parse_unary());
    }
    return parse_power();
  }

  Expression parse_power() {
    Expression base = parse_primary();
    if (accept('^')) return Expression::binary(BinaryOp::Pow, base, parse_unary());
    return base;
  }

  double parse_number() {
    skip_ws();
    std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.')) {
      ++pos_;
    }
    if (pos_ < text_.size() && (text_[pos_] == 'e' || text_[pos_] == 'E')) {
      std::size_t mark = pos_++;
      if (pos_ < text_.size() && (text_[pos_] == '+' || text_[pos_] == '-')) ++pos_;
      if (pos_ >= text_.size() || !std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
        pos_ = mark;
        syntax("malformed exponent");
      }
      while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(text_.data() + start, text_.data() + pos_, value);
    if (ec == std::errc::result_out_of_range) {
      pos_ = start;
      syntax("number out of range");
    }
    if (ec != std::errc() || ptr != text_.data() + pos_) {
      pos_ = start;
      syntax("malformed number");
    }
    return value;
  }

  std::string parse_ident() {
    std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) {
      ++pos_;
    }
    return std::string(text_.substr(start, pos_ - start));
  }

  std::vector<Expression> parse_args() {
    std::vector<Expression> args;
    expect('(');
    args.push_back(parse_expr());
    while (accept(',')) args.push_back(parse_expr());
    expect(')');
    return args;
  }

  Expression parse_primary() {
    skip_ws();
    if (pos_ >= text_.size()) syntax("expected an operand");
    char c = text_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      return Expression::constant(parse_number());
    }
    if (c == '(') {
      ++pos_;
      Expression inner = parse_expr();
      expect(')');
      return inner;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t start = pos_;
      std::string id = parse_ident();
      skip_ws();
      bool call = pos_ < text_.size() && text_[pos_] == '(';
      if (call) {
        static const std::map<std::string, UnaryOp, std::less<>> unary_fns = {
            {"exp", UnaryOp::Exp}, {"abs", UnaryOp::Abs}, {"sqrt", UnaryOp::Sqrt}};
        static const std::map<std::string, BinaryOp, std::less<>> binary_fns = {
            {"min", BinaryOp::Min}, {"max", BinaryOp::Max}, {"pow", BinaryOp::Pow}};
        if (auto it = unary_fns.find(id); it != unary_fns.end()) {
          auto args = parse_args();
          if (args.size() != 1) {
            pos_ = start;
            syntax(id + " takes one argument");
          }
          return Expression::unary(it->second, args[0]);
        }
        if (auto it = binary_fns.find(id); it != binary_fns.end()) {
          auto args = parse_args();
          if (args.size() != 2) {
            pos_ = start;
            syntax(id + " takes two arguments");
          }
          return Expression::binary(it->second, args[0], args[1]);
        }
        throw ExpressionError(ExpressionError::Kind::UnknownIdentifier,
                              "unknown function '" + id + "'", start);
      }
      if (!allowed_.contains(id)) {
        throw ExpressionError(ExpressionError::Kind::UnknownIdentifier,
                              "unknown identifier '" + id + "'", start);
      }
      return Expression::variable(id);
    }
    syntax("unexpected '" + std::string(1, c) + "'");
  }

  std::string_view text_;
  const std::set<std::string>& allowed_;
  std::size_t pos_ = 0;
};

bool is_const(const Expression& e, double v) {
  return e.kind() == Expression::Kind::Constant && e.constant_value() == v;
}

Expression add(const Expression& a, const Expression& b) {
  if (is_const(a, 0.0)) return b;
  if (is_const(b, 0.0)) return a;
  return Expression::binary(BinaryOp::Add, a, b);
}

Expression sub(const Expression& a, const Expression& b) {
  if (is_const(b, 0.0)) return a;
  if (is_const(a, 0.0)) return Expression::unary(UnaryOp::Neg, b);
  return Expression::binary(BinaryOp::Sub, a, b);
}

Expression mul(const Expression& a, const Expression& b) {
  if (is_const(a, 0.0) || is_const(b, 0.0)) return Expression::constant(0.0);
  if (is_const(a, 1.0)) return b;
  if (is_const(b, 1.0)) return a;
  return Expression::binary(BinaryOp::Mul, a, b);
}

Expression div(const Expression& a, const Expression& b) {
  if (is_const(a, 0.0)) return Expression::constant(0.0);
  return Expression::binary(BinaryOp::Div, a, b);
}

}  // namespace

double Expression::evaluate(const Bindings& bindings) const {
  double r = eval_node(*this, bindings);
  if (!std::isfinite(r)) fail(ExpressionError::Kind::Domain, "non-finite result");
  return r;
}

std::string Expression::to_string() const {
  std::string out;
  print_node(*this, out);
  return out;
}

std::set<std::string> Expression::variables() const {
  std::set<std::string> out;
  collect_vars(*this, out);
  return out;
}

bool Expression::depends_on(std::string_view name) const {
  switch (kind()) {
    case Kind::Constant: return false;
    case Kind::Variable: return variable_name() == name;
    case Kind::Unary: return operand(0).depends_on(name);
    case Kind::Binary: return operand(0).depends_on(name) || operand(1).depends_on(name);
  }
  return false;
}

bool Expression::is_zero() const { return is_const(*this, 0.0); }

bool operator==(const Expression& a, const Expression& b) {
  if (a.node_ == b.node_) return true;
  if (a.kind() != b.kind()) return false;
  switch (a.kind()) {
    case Expression::Kind::Constant:
      // Compare bit patterns so that 0 and -0 stay distinct.
      return std::signbit(a.constant_value()) == std::signbit(b.constant_value()) &&
             a.constant_value() == b.constant_value();
    case Expression::Kind::Variable: return a.variable_name() == b.variable_name();
    case Expression::Kind::Unary:
      return a.unary_op() == b.unary_op() && a.operand(0) == b.operand(0);
    case Expression::Kind::Binary:
      return a.binary_op() == b.binary_op() && a.operand(0) == b.operand(0) &&
             a.operand(1) == b.operand(1);
  }
  return false;
}

Expression parse_expression(std::string_view text, const std::set<std::string>& allowed_vars) {
  return Parser(text, allowed_vars).parse();
}

double eval_expression(const Expression& e, const Bindings& bindings) { return e.evaluate(bindings); }

std::optional<AffineSplit> split_affine(const Expression& e, std::string_view var) {
  if (!e.depends_on(var)) return AffineSplit{e, Expression::constant(0.0)};
  switch (e.kind()) {
    case Expression::Kind::Constant: return AffineSplit{e, Expression::constant(0.0)};
    case Expression::Kind::Variable:
      return AffineSplit{Expression::constant(0.0), Expression::constant(1.0)};
    case Expression::Kind::Unary: {
      if (e.unary_op() != UnaryOp::Neg) return std::nullopt;
      auto inner = split_affine(e.operand(0), var);
      if (!inner) return std::nullopt;
      return AffineSplit{sub(Expression::constant(0.0), inner->intercept),
                         sub(Expression::constant(0.0), inner->slope)};
    }
    case Expression::Kind::Binary: {
      const Expression& lhs = e.operand(0);
      const Expression& rhs = e.operand(1);
      switch (e.binary_op()) {
        case BinaryOp::Add:
        case BinaryOp::Sub: {
          auto a = split_affine(lhs, var);
          auto b = split_affine(rhs, var);
          if (!a || !b) return std::nullopt;
          if (e.binary_op() == BinaryOp::Add) {
            return AffineSplit{add(a->intercept, b->intercept), add(a->slope, b->slope)};
          }
          return AffineSplit{sub(a->intercept, b->intercept), sub(a->slope, b->slope)};
        }
        case BinaryOp::Mul: {
          if (lhs.depends_on(var) && rhs.depends_on(var)) return std::nullopt;
          const Expression& dep = lhs.depends_on(var) ? lhs : rhs;
          const Expression& factor = lhs.depends_on(var) ? rhs : lhs;
          auto a = split_affine(dep, var);
          if (!a) return std::nullopt;
          return AffineSplit{mul(a->intercept, factor), mul(a->slope, factor)};
        }
        case BinaryOp::Div: {
          if (rhs.depends_on(var)) return std::nullopt;
          auto a = split_affine(lhs, var);
          if (!a) return std::nullopt;
          return AffineSplit{div(a->intercept, rhs), div(a->slope, rhs)};
        }
        default: return std::nullopt;
      }
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

CompiledExpression::CompiledExpression(const Expression& e, const std::vector<std::string>& slots) {
  emit(e, slots);
  std::size_t depth = 0;
  for (const auto& ins : code_) {
    switch (ins.op) {
      case Op::Const:
      case Op::Var: max_depth_ = std::max(max_depth_, ++depth); break;
      case Op::Neg:
      case Op::Exp:
      case Op::Abs:
      case Op::Sqrt: break;
      default: --depth; break;
    }
  }
  constant_ = false;
  if (std::none_of(code_.begin(), code_.end(), [](const Instr& i) { return i.op == Op::Var; })) {
    value_ = (*this)(std::span<const double>{});
    constant_ = true;
  }
}

void CompiledExpression::emit(const Expression& e, const std::vector<std::string>& slots) {
  switch (e.kind()) {
    case Expression::Kind::Constant:
      consts_.push_back(e.constant_value());
      code_.push_back({Op::Const, consts_.size() - 1});
      return;
    case Expression::Kind::Variable: {
      auto it = std::find(slots.begin(), slots.end(), e.variable_name());
      if (it == slots.end()) {
        throw ExpressionError(ExpressionError::Kind::UnknownIdentifier,
                              "variable '" + e.variable_name() + "' has no slot");
      }
      code_.push_back({Op::Var, static_cast<std::size_t>(it - slots.begin())});
      return;
    }
    case Expression::Kind::Unary: {
      emit(e.operand(0), slots);
      static constexpr Op map[] = {Op::Neg, Op::Exp, Op::Abs, Op::Sqrt};
      code_.push_back({map[static_cast<int>(e.unary_op())]});
      return;
    }
    case Expression::Kind::Binary: {
      emit(e.operand(0), slots);
      emit(e.operand(1), slots);
      static constexpr Op map[] = {Op::Add, Op::Sub, Op::Mul, Op::Div, Op::Min, Op::Max, Op::Pow};
      code_.push_back({map[static_cast<int>(e.binary_op())]});
      return;
    }
  }
}

double CompiledExpression::operator()(std::span<const double> vars) const {
  if (constant_) return value_;
  double stack_buf[64];
  std::vector<double> heap;
  double* stack = stack_buf;
  if (max_depth_ > 64) {
    heap.resize(max_depth_);
    stack = heap.data();
  }
  std::size_t top = 0;
  for (const auto& ins : code_) {
    switch (ins.op) {
      case Op::Const: stack[top++] = consts_[ins.arg]; break;
      case Op::Var: stack[top++] = vars[ins.arg]; break;
      case Op::Neg: stack[top - 1] = -stack[top - 1]; break;
      case Op::Exp: stack[top - 1] = std::exp(stack[top - 1]); break;
      case Op::Abs: stack[top - 1] = std::fabs(stack[top - 1]); break;
      case Op::Sqrt: stack[top - 1] = apply_unary(UnaryOp::Sqrt, stack[top - 1]); break;
      case Op::Add: --top; stack[top - 1] += stack[top]; break;
      case Op::Sub: --top; stack[top - 1] -= stack[top]; break;
      case Op::Mul: --top; stack[top - 1] *= stack[top]; break;
      case Op::Div: --top; stack[top - 1] = apply_binary(BinaryOp::Div, stack[top - 1], stack[top]); break;
      case Op::Min: --top; stack[top - 1] = apply_binary(BinaryOp::Min, stack[top - 1], stack[top]); break;
      case Op::Max: --top; stack[top - 1] = apply_binary(BinaryOp::Max, stack[top - 1], stack[top]); break;
      case Op::Pow: --top; stack[top - 1] = apply_binary(BinaryOp::Pow, stack[top - 1], stack[top]); break;
    }
  }
  double r = code_.empty() ? 0.0 : stack[0];
  if (!std::isfinite(r)) fail(ExpressionError::Kind::Domain, "non-finite result");
  return r;
}

void CompiledExpression::evaluate_batch(std::span<const double* const> columns, std::size_t count,
                                        double* out) const {
  if (constant_) {
    std::fill(out, out + count, value_);
    return;
  }
  thread_local std::vector<double> scratch;
  if (scratch.size() < max_depth_ * count) scratch.resize(max_depth_ * count);
  double* base = scratch.data();
  std::size_t top = 0;
  auto reg = [&](std::size_t i) { return base + i * count; };
  for (const auto& ins : code_) {
    switch (ins.op) {
      case Op::Const: {
        double c = consts_[ins.arg];
        double* r = reg(top++);
        for (std::size_t k = 0; k < count; ++k) r[k] = c;
        break;
      }
      case Op::Var: {
        const double* src = columns[ins.arg];
        double* r = reg(top++);
        for (std::size_t k = 0; k < count; ++k) r[k] = src[k];
        break;
      }
      case Op::Neg: {
        double* r = reg(top - 1);
        for (std::size_t k = 0; k < count; ++k) r[k] = -r[k];
        break;
      }
      case Op::Exp: {
        double* r = reg(top - 1);
        for (std::size_t k = 0; k < count; ++k) r[k] = std::exp(r[k]);
        break;
      }
      case Op::Abs: {
        double* r = reg(top - 1);
        for (std::size_t k = 0; k < count; ++k) r[k] = std::fabs(r[k]);
        break;
      }
      case Op::Sqrt: {
        double* r = reg(top - 1);
        bool bad = false;
        for (std::size_t k = 0; k < count; ++k) bad |= r[k] < 0.0;
        if (bad) fail(ExpressionError::Kind::Domain, "sqrt of negative value");
        for (std::size_t k = 0; k < count; ++k) r[k] = std::sqrt(r[k]);
        break;
      }
      default: {
        --top;
        double* a = reg(top - 1);
        const double* b = reg(top);
        switch (ins.op) {
          case Op::Add:
            for (std::size_t k = 0; k < count; ++k) a[k] += b[k];
            break;
          case Op::Sub:
            for (std::size_t k = 0; k < count; ++k) a[k] -= b[k];
            break;
          case Op::Mul:
            for (std::size_t k = 0; k < count; ++k) a[k] *= b[k];
            break;
          case Op::Div: {
            bool bad = false;
            for (std::size_t k = 0; k < count; ++k) bad |= b[k] == 0.0;
            if (bad) fail(ExpressionError::Kind::DivisionByZero, "division by zero");
            for (std::size_t k = 0; k < count; ++k) a[k] /= b[k];
            break;
          }
          case Op::Min:
            for (std::size_t k = 0; k < count; ++k) a[k] = a[k] < b[k] ? a[k] : b[k];
            break;
          case Op::Max:
            for (std::size_t k = 0; k < count; ++k) a[k] = a[k] > b[k] ? a[k] : b[k];
            break;
          case Op::Pow:
            for (std::size_t k = 0; k < count; ++k) a[k] = std::pow(a[k], b[k]);
            break;
          default: break;
        }
      }
    }
  }
  std::copy(base, base + count, out);
}

}  // namespace rctl
