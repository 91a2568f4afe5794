#pragma once

// Real-valued functionals f(x, beta) of a path pair, with optional pathwise
// gradients, and the small expression language used for user functionals.

#include <functional>
#include <memory>
#include <string>
#include <string_view>

#include "diffvar/path_core.hpp"

namespace diffvar {

enum class PathComponent { x, beta };

class PathFunctional {
 public:
  using Eval = std::function<double(const Path& x, const Path& beta)>;
  /// Writes df/dx (node-wise, same shape as x.values()) and df/dbeta.
  using Gradient = std::function<void(const Path& x, const Path& beta, RowMatrix& dx, RowMatrix& dbeta)>;

  PathFunctional(std::string name, Eval eval, Gradient gradient = {});

  const std::string& name() const { return name_; }
  double operator()(const Path& x, const Path& beta) const { return eval_(x, beta); }
  bool differentiable() const { return static_cast<bool>(gradient_); }
  void gradient(const Path& x, const Path& beta, RowMatrix& dx, RowMatrix& dbeta) const;

 private:
  std::string name_;
  Eval eval_;
  Gradient gradient_;
};

namespace functionals {

PathFunctional constant(double value);
/// lambda * component(1)[index]
PathFunctional terminal_linear(double lambda, PathComponent component = PathComponent::x, std::size_t index = 0);
/// lambda * component(1)[index]^2
PathFunctional terminal_quadratic(double lambda, PathComponent component = PathComponent::x,
                                  std::size_t index = 0);
/// lambda * sum_k component(t_k)[index] dt (left-point rule)
PathFunctional running_integral(double lambda, PathComponent component = PathComponent::x,
                                std::size_t index = 0);
/// Expression over terminal values x0, x1, ..., b0, b1, ... (x and b alias index 0).
PathFunctional expression(std::string_view source);

}  // namespace functionals

/// Parsed arithmetic expression over terminal path values.
class Expression {
 public:
  /// Grammar: sums and products of numbers, variables, function calls
  /// (sin cos tan exp log sqrt abs tanh), constants pi and e, unary minus,
  /// '^' (right associative) and parentheses. Throws InvalidInput on errors.
  static Expression parse(std::string_view source);

  double evaluate(const Eigen::Ref<const Eigen::RowVectorXd>& x, const Eigen::Ref<const Eigen::RowVectorXd>& b) const;
  /// Largest variable index referenced for each component, -1 when unused.
  int max_x_index() const { return max_x_; }
  int max_b_index() const { return max_b_; }
  const std::string& source() const { return source_; }

  struct Node;

 private:
  std::shared_ptr<const Node> root_;
  std::string source_;
  int max_x_ = -1;
  int max_b_ = -1;
};

}  // namespace diffvar
