#include <doctest.h>

#include <cmath>

#include "diffvar/errors.hpp"
#include "diffvar/functional.hpp"

using namespace diffvar;

namespace {

Path linear_path(const TimeGrid& grid, double slope) {
  Path p(grid, 2);
  for (std::size_t k = 0; k <= grid.n_steps(); ++k) {
    p.values()(static_cast<Eigen::Index>(k), 0) = slope * grid.node(k);
    p.values()(static_cast<Eigen::Index>(k), 1) = -grid.node(k);
  }
  return p;
}

}  // namespace

TEST_CASE("preset functionals") {
  TimeGrid grid(4);
  Path x = linear_path(grid, 3.0);
  Path b = linear_path(grid, -2.0);
  CHECK(functionals::constant(1.5)(x, b) == 1.5);
  CHECK(functionals::terminal_linear(2.0)(x, b) == 6.0);
  CHECK(functionals::terminal_linear(1.0, PathComponent::beta)(x, b) == -2.0);
  CHECK(functionals::terminal_quadratic(1.0, PathComponent::x, 1)(x, b) == 1.0);
  // left-point rule: 3 * (0 + 0.25 + 0.5 + 0.75) / 4
  CHECK(functionals::running_integral(1.0)(x, b) == doctest::Approx(1.125));
  CHECK_THROWS_AS(functionals::terminal_linear(1.0, PathComponent::x, 5)(x, b), InvalidInput);
}

TEST_CASE("preset gradients match finite differences") {
  TimeGrid grid(5);
  Path x = linear_path(grid, 1.3);
  Path b = linear_path(grid, 0.4);
  for (const auto& f : {functionals::terminal_linear(0.7), functionals::terminal_quadratic(1.1, PathComponent::beta),
                        functionals::running_integral(2.0)}) {
    RowMatrix gx, gb;
    f.gradient(x, b, gx, gb);
    for (int which = 0; which < 2; ++which) {
      Path& p = which == 0 ? x : b;
      const RowMatrix& g = which == 0 ? gx : gb;
      for (Eigen::Index r = 0; r < p.values().rows(); ++r)
        for (Eigen::Index c = 0; c < p.values().cols(); ++c) {
          const double h = 1e-6, keep = p.values()(r, c);
          p.values()(r, c) = keep + h;
          const double up = f(x, b);
          p.values()(r, c) = keep - h;
          const double down = f(x, b);
          p.values()(r, c) = keep;
          CHECK(g(r, c) == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
        }
    }
  }
}

TEST_CASE("expression language") {
  Eigen::RowVectorXd x(2), b(1);
  x << 2.0, -1.0;
  b << 0.5;
  auto eval = [&](const char* src) { return Expression::parse(src).evaluate(x, b); };
  CHECK(eval("1 + 2 * 3") == 7.0);
  CHECK(eval("(1 + 2) * 3") == 9.0);
  CHECK(eval("2 ^ 3 ^ 2") == 512.0);
  CHECK(eval("-2 ^ 2") == -4.0);
  CHECK(eval("x * x1 + b") == -1.5);
  CHECK(eval("x0 - b0 / 2") == 1.75);
  CHECK(eval("sin(pi / 2) + exp(0) + log(e)") == doctest::Approx(3.0));
  CHECK(eval("sqrt(abs(x1)) + tanh(0) + cos(0) + tan(0)") == 2.0);
  CHECK(eval("1.5e1 - 2E-1") == doctest::Approx(14.8));
  auto e = Expression::parse("x3 + b2");
  CHECK(e.max_x_index() == 3);
  CHECK(e.max_b_index() == 2);
  for (const char* bad : {"", "1 +", "(1", "foo(1)", "x + y", "1 2", "sin 1", "3 $ 4"})
    CHECK_THROWS_AS(Expression::parse(bad), InvalidInput);
}

TEST_CASE("expression functionals read terminal values") {
  TimeGrid grid(4);
  Path x = linear_path(grid, 3.0);
  Path b = linear_path(grid, -2.0);
  CHECK(functionals::expression("x0^2 + b1")(x, b) == 8.0);
  CHECK_THROWS_AS(functionals::expression("x7")(x, b), InvalidInput);
  CHECK(!functionals::expression("x").differentiable());
}
