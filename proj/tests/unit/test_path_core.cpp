#include <doctest.h>

#include <cmath>
#include <vector>

#include "diffvar/errors.hpp"
#include "diffvar/path_core.hpp"
#include "diffvar/statistics.hpp"

using namespace diffvar;

TEST_CASE("time grid nodes span the unit interval") {
  for (std::size_t n : {1u, 3u, 64u, 1000u}) {
    TimeGrid grid(n);
    CHECK(grid.node(0) == 0.0);
    CHECK(grid.node(n) == 1.0);
    CHECK(std::abs(grid.dt() * static_cast<double>(n) - 1.0) <= 1e-15);
    for (std::size_t k = 0; k < n; ++k) CHECK(grid.node(k) < grid.node(k + 1));
  }
  CHECK_THROWS_AS(TimeGrid(0), InvalidInput);
}

TEST_CASE("cm_norm_sq hand values") {
  TimeGrid grid(4);
  CHECK(cm_norm_sq(CameronMartinShift::zero(grid, 2)) == 0.0);
  CHECK(cm_norm_sq(CameronMartinShift::constant(grid, Vector::Ones(1))) == doctest::Approx(1.0).epsilon(1e-15));
  RowMatrix rates(4, 1);
  for (int k = 0; k < 4; ++k) rates(k, 0) = grid.node(static_cast<std::size_t>(k));
  CHECK(cm_norm_sq(CameronMartinShift(grid, rates)) == doctest::Approx(0.21875).epsilon(1e-15));
}

TEST_CASE("integrate_density examples") {
  TimeGrid grid(8);
  Path zero = integrate_density(CameronMartinShift::zero(grid, 1));
  CHECK(zero.values().cwiseAbs().maxCoeff() == 0.0);
  Vector rate(2);
  rate << 1.0, -1.0;
  Path h = integrate_density(CameronMartinShift::constant(grid, rate));
  for (std::size_t k = 0; k <= 8; ++k) {
    CHECK(h.at(k, 0) == doctest::Approx(grid.node(k)).epsilon(1e-15));
    CHECK(h.at(k, 1) == doctest::Approx(-grid.node(k)).epsilon(1e-15));
  }
}

TEST_CASE("linearity and quadratic scaling") {
  TimeGrid grid(16);
  RandomStream stream{99, 0};
  for (int trial = 0; trial < 50; ++trial) {
    CameronMartinShift u(grid, brownian_increments(stream.offset(2 * trial), grid, 3));
    CameronMartinShift v(grid, brownian_increments(stream.offset(2 * trial + 1), grid, 3));
    const double a = 0.3 + trial, b = -1.7;
    Path lhs = integrate_density(u.scaled(a) + v.scaled(b));
    RowMatrix rhs = a * integrate_density(u).values() + b * integrate_density(v).values();
    CHECK((lhs.values() - rhs).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + rhs.cwiseAbs().maxCoeff()));
    CHECK(cm_norm_sq(u.scaled(a)) == doctest::Approx(a * a * cm_norm_sq(u)).epsilon(1e-12));
  }
}

TEST_CASE("adaptedness of sums is the weaker tag") {
  using A = Adaptedness;
  CHECK(A::combine(A::deterministic(), A::deterministic()) == A::deterministic());
  CHECK(A::combine(A::deterministic(), A::markov_feedback()) == A::markov_feedback());
  CHECK(A::combine(A::path_functional(3), A::path_functional(1)) == A::path_functional(1));
  CHECK(A::combine(A::deterministic(), A::path_functional(2)) == A::path_functional(2));
  CHECK(A::combine(A::markov_feedback(), A::path_functional(2)) == A::path_functional(0));
}

TEST_CASE("increments are reproducible and stream dependent") {
  TimeGrid grid(32);
  RandomStream s{7, 11};
  RowMatrix a = brownian_increments(s, grid, 2);
  RowMatrix b = brownian_increments(s, grid, 2);
  CHECK(a == b);
  CHECK(!(a == brownian_increments(s.offset(1), grid, 2)));
  CHECK(!(a == brownian_increments(s.derive(1), grid, 2)));
  CHECK_THROWS_AS(brownian_increments(s, grid, 0), InvalidInput);
}

TEST_CASE("increment moments over a million streams") {
  TimeGrid grid(4);
  const std::size_t n = 1'000'000;
  std::vector<double> first(n), squares(n);
  RowMatrix buf(4, 1);
  RandomStream base{2024, 0};
  for (std::size_t i = 0; i < n; ++i) {
    fill_brownian_increments(base.offset(i), grid, buf);
    first[i] = buf(2, 0);
    squares[i] = buf(2, 0) * buf(2, 0);
  }
  const double mean = pairwise_sum(first) / static_cast<double>(n);
  CHECK(std::abs(mean) <= 3.0 * grid.sqrt_dt() / 1e3);
  const double var = pairwise_sum(squares) / static_cast<double>(n) - mean * mean;
  CHECK(std::abs(var / grid.dt() - 1.0) <= 0.01);
}

TEST_CASE("pairwise statistics") {
  std::vector<double> x{1.0, 2.0, 3.0, 4.0};
  auto e = estimate_mean(x);
  CHECK(e.value == 2.5);
  CHECK(e.std_error == doctest::Approx(std::sqrt(5.0 / 3.0 / 4.0)));
  CHECK(e.n_samples == 4);
  std::vector<double> empty;
  CHECK_THROWS_AS(estimate_mean(empty), NumericalFailure);
}
