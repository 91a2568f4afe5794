#include <doctest.h>

#include <cmath>

#include "diffvar/errors.hpp"
#include "diffvar/girsanov.hpp"

using namespace diffvar;

namespace {

// KL between N(h, C) and N(0, C) on the grid nodes t_1..t_n, C_ij = min(t_i, t_j).
double gaussian_shift_kl(const CameronMartinShift& u) {
  const auto n = static_cast<Eigen::Index>(u.grid().n_steps());
  Matrix cov(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) cov(i, j) = static_cast<double>(std::min(i, j) + 1) * u.grid().dt();
  Path h = integrate_density(u);
  double kl = 0;
  Eigen::LLT<Matrix> llt(cov);
  for (std::size_t c = 0; c < u.dim(); ++c) {
    Vector mean(n);
    for (Eigen::Index i = 0; i < n; ++i) mean(i) = h.at(static_cast<std::size_t>(i + 1), c);
    kl += 0.5 * mean.dot(llt.solve(mean));
  }
  return kl;
}

}  // namespace

TEST_CASE("log Wick exponential") {
  TimeGrid grid(4);
  RowMatrix inc(4, 1);
  inc << 0.1, -0.2, 0.3, 0.05;
  auto v = CameronMartinShift::constant(grid, Vector::Constant(1, 2.0));
  // 2 * W_1 - 1/2 * 4
  CHECK(log_wick(v, inc) == doctest::Approx(2.0 * 0.25 - 2.0).epsilon(1e-15));
  CHECK(log_wick(CameronMartinShift::zero(grid, 1), inc) == 0.0);
  // rho(delta v) rho(-delta v) = exp(-|v|^2)
  CHECK(log_wick(v, inc) + log_wick(-v, inc) == doctest::Approx(-cm_norm_sq(v)));
}

TEST_CASE("Wick exponential has mean one") {
  TimeGrid grid(16);
  RowMatrix rates(16, 2);
  for (Eigen::Index k = 0; k < 16; ++k) rates.row(k) << std::sin(0.3 * static_cast<double>(k)), 0.5;
  CameronMartinShift v(grid, rates);
  RandomStream stream{11, 0};
  std::vector<double> w(50'000);
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = std::exp(log_wick(v, brownian_increments(stream.offset(i), grid, 2)));
  auto est = estimate_mean(w);
  CHECK(std::abs(est.value - 1.0) <= 4.0 * est.std_error);
}

TEST_CASE("Girsanov reweighting") {
  TimeGrid grid(32);
  RandomStream stream{5, 0};
  DeterministicRule u(CameronMartinShift::constant(grid, Vector::Constant(1, 0.7)));
  auto coeffs = presets::sinusoidal();
  auto f = functionals::expression("sin(x) + x^2");
  auto est = reweighted_expectation(f, coeffs, u, grid, 40'000, stream);
  CHECK(est.agrees());
  CHECK(std::abs(est.weight.value - 1.0) <= 4.0 * est.weight.std_error);
  CHECK(est.rejected == 0);

  GirsanovOptions flipped;
  flipped.flip_wick_sign = true;
  auto bad = reweighted_expectation(functionals::terminal_linear(1.0), presets::brownian(), u, grid, 40'000, stream,
                                    flipped);
  CHECK(!bad.agrees());

  MarkovFeedbackRule feedback(1, [](double t, const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) {
    out(0) = -x(0) * (1.0 - t);
  });
  auto fb = reweighted_expectation(functionals::terminal_quadratic(1.0), presets::brownian(), feedback, grid, 40'000,
                                   stream);
  CHECK(fb.agrees());
  CHECK(fb.lhs.value == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("entropy of invertible shifts") {
  TimeGrid grid(8);
  RowMatrix rates(8, 1);
  for (Eigen::Index k = 0; k < 8; ++k) rates(k, 0) = 1.0 - 0.25 * static_cast<double>(k);
  CameronMartinShift shift(grid, rates);
  DeterministicRule u(shift);
  auto e = entropy_if_invertible(u, presets::brownian(), grid, 1000, RandomStream{1, 0});
  CHECK(e.value == doctest::Approx(0.5 * cm_norm_sq(shift)).epsilon(1e-14));
  CHECK(e.value == doctest::Approx(gaussian_shift_kl(shift)).epsilon(1e-10));
  CHECK(e.std_error == 0.0);

  MarkovFeedbackRule markov(1, [](double, const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) { out = x; });
  CHECK_THROWS_AS(entropy_if_invertible(markov, presets::brownian(), grid, 10, RandomStream{}), InvalidInput);
  RetardedRule instant(1, 0, [](std::size_t, const HistoryView&, const HistoryView&, Eigen::Ref<Vector> out) {
    out.setZero();
  });
  CHECK_THROWS_AS(entropy_if_invertible(instant, presets::brownian(), grid, 10, RandomStream{}), InvalidInput);

  RetardedRule delayed(1, 1, [](std::size_t k, const HistoryView& x, const HistoryView&, Eigen::Ref<Vector> out) {
    out(0) = k >= 1 ? 0.5 * x.at(k - 1, 0) : 0.0;
  });
  auto r = entropy_if_invertible(delayed, presets::brownian(), grid, 20'000, RandomStream{2, 0});
  // E|u|^2 / 2 = 1/8 sum_{k>=1} t_{k-1} dt
  double expected = 0;
  for (std::size_t k = 1; k < 8; ++k) expected += 0.125 * grid.node(k - 1) * grid.dt();
  CHECK(std::abs(r.value - expected) <= 4.0 * r.std_error);
}

TEST_CASE("entropy upper bound") {
  TimeGrid grid(16);
  DeterministicRule u(CameronMartinShift::constant(grid, Vector::Constant(1, 1.0)));
  auto mc = entropy_upper_bound_check(u, presets::brownian(), grid, 20'000, RandomStream{3, 0});
  CHECK(mc.mode == "monte_carlo");
  CHECK(mc.holds);
  CHECK(mc.kinetic.value == doctest::Approx(0.5));
  CHECK(std::abs(mc.kl.value - 0.5) <= 4.0 * mc.kl.std_error);

  TreePathMeasure tree(TimeGrid(10), 1);
  auto identity = entropy_upper_bound_check([](const Path& w, Path& y) { y = w; }, tree);
  CHECK(identity.kl.value == doctest::Approx(0.0));
  CHECK(identity.kinetic.value == 0.0);

  auto tanaka = entropy_upper_bound_check(tanaka_map(), tree);
  CHECK(tanaka.mode == "exact_tree");
  CHECK(tanaka.holds);
  CHECK(std::abs(tanaka.kl.value) <= 1e-12);
  CHECK(tanaka.kinetic.value > 0.1);
}

TEST_CASE("Tanaka map is a bijection on the tree") {
  TreePathMeasure tree(TimeGrid(6), 1);
  auto q = pushforward_of_map(tanaka_map(), tree);
  for (double v : q) CHECK(v == doctest::Approx(1.0 / 64));
}

TEST_CASE("reflection map") {
  TreePathMeasure tree(TimeGrid(6), 1);
  auto map = reflection_map();
  // up, down, then mirror images of each other
  Path a = tree.driver_path(0b100111), b = tree.driver_path(0b101000);
  Path ya(a.grid(), 1), yb(b.grid(), 1);
  map(a, ya);
  map(b, yb);
  CHECK(tree.index_of(ya) == tree.index_of(yb));
  for (std::size_t k = 0; k <= 6; ++k) CHECK(ya.at(k, 0) == doctest::Approx(std::abs(a.at(k, 0))));

  // one step: y = |w| sends both paths up
  TreePathMeasure one(TimeGrid(1), 1);
  auto r1 = entropy_upper_bound_check(reflection_map(), one);
  CHECK(r1.kl.value == doctest::Approx(std::log(2.0)));
  CHECK(r1.kinetic.value == doctest::Approx(1.0));

  TreePathMeasure tree10(TimeGrid(10), 1);
  auto r = entropy_upper_bound_check(reflection_map(), tree10);
  CHECK(r.holds);
  CHECK(r.gap() > 0.0);
}
