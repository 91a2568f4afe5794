#include "diffvar/functional.hpp"

#include <cctype>
#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include <fmt/core.h>

#include "diffvar/errors.hpp"

namespace diffvar {

PathFunctional::PathFunctional(std::string name, Eval eval, Gradient gradient)
    : name_(std::move(name)), eval_(std::move(eval)), gradient_(std::move(gradient)) {
  if (!eval_) throw InvalidInput("functional needs an evaluator");
}

void PathFunctional::gradient(const Path& x, const Path& beta, RowMatrix& dx, RowMatrix& dbeta) const {
  if (!gradient_) throw InvalidInput(fmt::format("functional '{}' has no gradient", name_));
  dx.setZero(x.values().rows(), x.values().cols());
  dbeta.setZero(beta.values().rows(), beta.values().cols());
  gradient_(x, beta, dx, dbeta);
}

namespace functionals {

namespace {

const Path& pick(PathComponent c, const Path& x, const Path& beta) {
  return c == PathComponent::x ? x : beta;
}

RowMatrix& pick(PathComponent c, RowMatrix& dx, RowMatrix& dbeta) {
  return c == PathComponent::x ? dx : dbeta;
}

void check_index(const Path& p, std::size_t index) {
  if (index >= p.dim()) throw InvalidInput(fmt::format("component index {} out of range (dim {})", index, p.dim()));
}

const char* label(PathComponent c) { return c == PathComponent::x ? "x" : "beta"; }

}  // namespace

PathFunctional constant(double value) {
  return {fmt::format("constant({})", value), [value](const Path&, const Path&) { return value; },
          [](const Path&, const Path&, RowMatrix&, RowMatrix&) {}};
}

PathFunctional terminal_linear(double lambda, PathComponent component, std::size_t index) {
  return {fmt::format("terminal_linear({}, {}{})", lambda, label(component), index),
          [=](const Path& x, const Path& beta) {
            const Path& p = pick(component, x, beta);
            check_index(p, index);
            return lambda * p.at(p.node_count() - 1, index);
          },
          [=](const Path&, const Path&, RowMatrix& dx, RowMatrix& dbeta) {
            RowMatrix& g = pick(component, dx, dbeta);
            g(g.rows() - 1, static_cast<Eigen::Index>(index)) = lambda;
          }};
}

PathFunctional terminal_quadratic(double lambda, PathComponent component, std::size_t index) {
  return {fmt::format("terminal_quadratic({}, {}{})", lambda, label(component), index),
          [=](const Path& x, const Path& beta) {
            const Path& p = pick(component, x, beta);
            check_index(p, index);
            const double v = p.at(p.node_count() - 1, index);
            return lambda * v * v;
          },
          [=](const Path& x, const Path& beta, RowMatrix& dx, RowMatrix& dbeta) {
            const Path& p = pick(component, x, beta);
            RowMatrix& g = pick(component, dx, dbeta);
            g(g.rows() - 1, static_cast<Eigen::Index>(index)) = 2.0 * lambda * p.at(p.node_count() - 1, index);
          }};
}

PathFunctional running_integral(double lambda, PathComponent component, std::size_t index) {
  return {fmt::format("running_integral({}, {}{})", lambda, label(component), index),
          [=](const Path& x, const Path& beta) {
            const Path& p = pick(component, x, beta);
            check_index(p, index);
            const auto n = static_cast<Eigen::Index>(p.grid().n_steps());
            return lambda * p.values().col(static_cast<Eigen::Index>(index)).head(n).sum() * p.grid().dt();
          },
          [=](const Path& x, const Path&, RowMatrix& dx, RowMatrix& dbeta) {
            RowMatrix& g = pick(component, dx, dbeta);
            const auto n = static_cast<Eigen::Index>(x.grid().n_steps());
            g.col(static_cast<Eigen::Index>(index)).head(n).setConstant(lambda * x.grid().dt());
          }};
}

PathFunctional expression(std::string_view source) {
  auto expr = std::make_shared<const Expression>(Expression::parse(source));
  return {fmt::format("expr({})", expr->source()), [expr](const Path& x, const Path& beta) {
            if (expr->max_x_index() >= static_cast<int>(x.dim()) || expr->max_b_index() >= static_cast<int>(beta.dim()))
              throw InvalidInput(fmt::format("expression '{}' refers to a coordinate beyond the path dimension",
                                             expr->source()));
            return expr->evaluate(x.node(x.node_count() - 1), beta.node(beta.node_count() - 1));
          }};
}

}  // namespace functionals

// ---------------------------------------------------------------------------
// Expression language

struct Expression::Node {
  enum class Kind { number, x_var, b_var, negate, add, sub, mul, div, pow, call };
  using Fn = double (*)(double);

  Kind kind = Kind::number;
  double number = 0.0;
  std::size_t index = 0;
  Fn fn = nullptr;
  std::shared_ptr<const Node> lhs;
  std::shared_ptr<const Node> rhs;

  double eval(const Eigen::Ref<const Eigen::RowVectorXd>& x, const Eigen::Ref<const Eigen::RowVectorXd>& b) const {
    switch (kind) {
      case Kind::number:
        return number;
      case Kind::x_var:
        return x(static_cast<Eigen::Index>(index));
      case Kind::b_var:
        return b(static_cast<Eigen::Index>(index));
      case Kind::negate:
        return -lhs->eval(x, b);
      case Kind::add:
        return lhs->eval(x, b) + rhs->eval(x, b);
      case Kind::sub:
        return lhs->eval(x, b) - rhs->eval(x, b);
      case Kind::mul:
        return lhs->eval(x, b) * rhs->eval(x, b);
      case Kind::div:
        return lhs->eval(x, b) / rhs->eval(x, b);
      case Kind::pow:
        return std::pow(lhs->eval(x, b), rhs->eval(x, b));
      case Kind::call:
        return fn(lhs->eval(x, b));
    }
    return 0.0;
  }
};

namespace {

using NodePtr = std::shared_ptr<const Expression::Node>;
using Kind = Expression::Node::Kind;

NodePtr make(Kind kind, NodePtr lhs = nullptr, NodePtr rhs = nullptr) {
  auto n = std::make_shared<Expression::Node>();
  n->kind = kind;
  n->lhs = std::move(lhs);
  n->rhs = std::move(rhs);
  return n;
}

struct NamedFunction {
  std::string_view name;
  Expression::Node::Fn fn;
};

constexpr NamedFunction kFunctions[] = {
    {"sin", [](double v) { return std::sin(v); }},   {"cos", [](double v) { return std::cos(v); }},
    {"tan", [](double v) { return std::tan(v); }},   {"exp", [](double v) { return std::exp(v); }},
    {"log", [](double v) { return std::log(v); }},   {"sqrt", [](double v) { return std::sqrt(v); }},
    {"abs", [](double v) { return std::abs(v); }},   {"tanh", [](double v) { return std::tanh(v); }},
};

class Parser {
 public:
  explicit Parser(std::string_view src) : src_(src) {}

  NodePtr parse_all() {
    NodePtr root = parse_sum();
    skip_space();
    if (pos_ != src_.size()) fail("unexpected trailing input");
    return root;
  }

  int max_x = -1;
  int max_b = -1;

 private:
  [[noreturn]] void fail(std::string_view what) const {
    throw InvalidInput(fmt::format("expression '{}': {} at offset {}", src_, what, pos_));
  }

  void skip_space() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip_space();
    if (pos_ < src_.size() && src_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  NodePtr parse_sum() {
    NodePtr node = parse_product();
    for (;;) {
      if (accept('+'))
        node = make(Kind::add, node, parse_product());
      else if (accept('-'))
        node = make(Kind::sub, node, parse_product());
      else
        return node;
    }
  }

  NodePtr parse_product() {
    NodePtr node = parse_unary();
    for (;;) {
      if (accept('*'))
        node = make(Kind::mul, node, parse_unary());
      else if (accept('/'))
        node = make(Kind::div, node, parse_unary());
      else
        return node;
    }
  }

  NodePtr parse_unary() {
    if (accept('-')) return make(Kind::negate, parse_unary());
    if (accept('+')) return parse_unary();
    return parse_power();
  }

  NodePtr parse_power() {
    NodePtr base = parse_atom();
    if (accept('^')) return make(Kind::pow, base, parse_unary());
    return base;
  }

  NodePtr parse_atom() {
    skip_space();
    if (pos_ >= src_.size()) fail("unexpected end of input");
    if (accept('(')) {
      NodePtr inner = parse_sum();
      if (!accept(')')) fail("expected ')'");
      return inner;
    }
    const char c = src_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
    if (std::isalpha(static_cast<unsigned char>(c))) return parse_name();
    fail(fmt::format("unexpected character '{}'", c));
  }

  NodePtr parse_number() {
    const std::size_t start = pos_;
    while (pos_ < src_.size() && (std::isdigit(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '.')) ++pos_;
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      std::size_t look = pos_ + 1;
      if (look < src_.size() && (src_[look] == '+' || src_[look] == '-')) ++look;
      if (look < src_.size() && std::isdigit(static_cast<unsigned char>(src_[look]))) {
        pos_ = look;
        while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
      }
    }
    const std::string text(src_.substr(start, pos_ - start));
    std::size_t used = 0;
    double value = 0.0;
    try {
      value = std::stod(text, &used);
    } catch (const std::exception&) {
      fail(fmt::format("bad number '{}'", text));
    }
    if (used != text.size()) fail(fmt::format("bad number '{}'", text));
    auto n = std::make_shared<Expression::Node>();
    n->number = value;
    return n;
  }

  NodePtr parse_name() {
    const std::size_t start = pos_;
    while (pos_ < src_.size() && std::isalnum(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    const std::string_view name = src_.substr(start, pos_ - start);
    for (const auto& f : kFunctions) {
      if (name == f.name) {
        if (!accept('(')) fail(fmt::format("expected '(' after {}", name));
        NodePtr arg = parse_sum();
        if (!accept(')')) fail("expected ')'");
        auto n = std::make_shared<Expression::Node>();
        n->kind = Kind::call;
        n->fn = f.fn;
        n->lhs = std::move(arg);
        return n;
      }
    }
    auto n = std::make_shared<Expression::Node>();
    if (name == "pi") {
      n->number = std::numbers::pi;
      return n;
    }
    if (name == "e") {
      n->number = std::numbers::e;
      return n;
    }
    if (name[0] == 'x' || name[0] == 'b') {
      const std::string_view digits = name.substr(1);
      std::size_t index = 0;
      for (char d : digits) {
        if (!std::isdigit(static_cast<unsigned char>(d))) fail(fmt::format("unknown name '{}'", name));
        index = index * 10 + static_cast<std::size_t>(d - '0');
        if (index > 1000) fail("variable index too large");
      }
      n->kind = name[0] == 'x' ? Kind::x_var : Kind::b_var;
      n->index = index;
      int& slot = name[0] == 'x' ? max_x : max_b;
      slot = std::max(slot, static_cast<int>(index));
      return n;
    }
    fail(fmt::format("unknown name '{}'", name));
  }

  std::string_view src_;
  std::size_t pos_ = 0;
};

}  // namespace

Expression Expression::parse(std::string_view source) {
  Parser parser(source);
  Expression expr;
  expr.root_ = parser.parse_all();
  expr.source_ = std::string(source);
  expr.max_x_ = parser.max_x;
  expr.max_b_ = parser.max_b;
  return expr;
}

double Expression::evaluate(const Eigen::Ref<const Eigen::RowVectorXd>& x,
                            const Eigen::Ref<const Eigen::RowVectorXd>& b) const {
  return root_->eval(x, b);
}

}  // namespace diffvar
