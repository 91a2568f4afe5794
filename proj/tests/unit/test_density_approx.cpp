#include <doctest.h>

#include <cmath>

#include "diffvar/density_approx.hpp"
#include "diffvar/errors.hpp"
#include "diffvar/statistics.hpp"

using namespace diffvar;

namespace {

std::vector<double> smooth_density(const TreePathMeasure& tree) {
  std::vector<double> L(tree.path_count());
  for (std::size_t p = 0; p < L.size(); ++p) L[p] = std::exp(tree.driver_path(p).at(tree.n_steps(), 0) - 0.5);
  const double mean = pairwise_sum(L) / static_cast<double>(L.size());
  for (double& v : L) v /= mean;
  return L;
}

}  // namespace

TEST_CASE("parameter validation") {
  CHECK_NOTHROW(ApproximationParams{2.0, 0.5, 2.0, 1}.validate(4));
  CHECK_THROWS_AS((ApproximationParams{0.5, 0.5, 2.0, 1}.validate(4)), InvalidInput);
  CHECK_THROWS_AS((ApproximationParams{2.0, 1.5, 2.0, 1}.validate(4)), InvalidInput);
  CHECK_THROWS_AS((ApproximationParams{2.0, 0.5, 0.5, 1}.validate(4)), InvalidInput);
  CHECK_THROWS_AS((ApproximationParams{2.0, 0.5, 2.0, 0}.validate(4)), InvalidInput);
  CHECK_THROWS_AS((ApproximationParams{2.0, 0.5, 2.0, 5}.validate(4)), InvalidInput);
}

TEST_CASE("truncation and mixing") {
  TreePathMeasure one(TimeGrid(1), 1);
  std::vector<double> L{4.0, 0.4};
  auto t = truncate_normalize(L, 2.0, one);
  CHECK(t[0] == doctest::Approx(5.0 / 3.0));
  CHECK(t[1] == doctest::Approx(1.0 / 3.0));
  auto m = mix(t, 0.5);
  CHECK(m[0] == doctest::Approx(13.0 / 9.0));
  CHECK(m[1] == doctest::Approx(5.0 / 9.0));
  CHECK(mix(t, 0.0)[0] == t[0]);
}

TEST_CASE("constant density needs no control") {
  TreePathMeasure tree(TimeGrid(6), 1);
  std::vector<double> L(tree.path_count(), 1.0);
  auto r = build_control(L, {2.0, 0.5, 2.0, 2}, tree);
  for (double v : r.density) CHECK(v == doctest::Approx(1.0));
  CHECK(r.diagnostics.l1_LlogL <= 1e-14);
  CHECK(r.diagnostics.energy == 0.0);
}

TEST_CASE("pipeline invariants") {
  TreePathMeasure tree(TimeGrid(10), 1);
  auto L = smooth_density(tree);
  for (std::size_t eta : {1u, 2u, 5u}) {
    ApproximationParams params{4.0, 0.25, 3.0, eta};
    auto r = build_control(L, params, tree);
    CHECK(r.control.delay == eta);
    CHECK(r.diagnostics.mean_density == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.diagnostics.energy <= params.n + 1e-12);
    double lo = 1e300;
    for (double v : r.density) lo = std::min(lo, v);
    CHECK(lo > 0.0);
    // gamma on level k only depends on the node at level k - eta
    for (std::size_t k = 0; k < tree.n_steps(); ++k)
      for (std::size_t j = 0; j < tree.nodes_at(k); ++j) {
        const std::size_t sibling = j ^ (k >= eta ? std::size_t{1} << (eta - 1) : 0);
        if (k >= 1) CHECK(r.control.gamma.at(k, j) == r.control.gamma.at(k, sibling));
      }
    for (std::size_t p = 0; p < tree.path_count(); p += 37)
      CHECK(invert_retarded(r.control, tree, apply_retarded_shift(r.control, tree, p)) == p);
  }
  RetardedTreeControl instant{NodeFunction(tree, 9, 1), 0};
  CHECK_THROWS_AS(invert_retarded(instant, tree, tree.driver_path(0)), InvalidInput);
}

TEST_CASE("approximation improves along a schedule") {
  TreePathMeasure tree(TimeGrid(12), 1);
  auto L = smooth_density(tree);
  auto coarse = build_control(L, {2.0, 0.5, 2.0, 6}, tree);
  auto fine = build_control(L, {8.0, 0.125, 8.0, 1}, tree);
  CHECK(fine.diagnostics.l1_LlogL < coarse.diagnostics.l1_LlogL);
  CHECK(fine.diagnostics.l1_logL < coarse.diagnostics.l1_logL);
}

TEST_CASE("continuous inversion of a delayed shift") {
  TimeGrid grid(40);
  auto coeffs = presets::sinusoidal();
  RetardedRule gamma(1, 2, [](std::size_t k, const HistoryView& x, const HistoryView& b, Eigen::Ref<Vector> out) {
    out(0) = k >= 2 ? std::sin(x.at(k - 2, 0)) + 0.5 * b.at(k - 2, 0) : 0.3;
  });
  for (std::uint64_t s = 0; s < 5; ++s) {
    Path beta = Path::from_increments(grid, brownian_increments(RandomStream{s, 0}, grid, 1));
    Path x = euler_maruyama(coeffs, grid, beta.increments());
    auto observed = apply_shift_map(coeffs, NegatedRule(gamma), x, beta).image;
    auto back = invert_retarded(coeffs, gamma, observed.x, observed.beta);
    CHECK((back.beta.values() - beta.values()).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((back.x.values() - x.values()).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("regression control") {
  TimeGrid grid(10);
  ApproximationParams params{4.0, 0.25, 4.0, 1};
  auto flat = RegressionControl::fit(functionals::constant(1.0), presets::brownian(), params, grid, 2000,
                                     RandomStream{1, 0});
  // only regression noise of size sqrt(1 / (dt n_paths)) remains
  for (std::size_t k = 0; k < 10; ++k) CHECK(std::abs(flat.alpha(k, 0.3)) <= 0.35);
  CHECK(flat.rule().adaptedness() == Adaptedness::path_functional(1));

  // L = exp(x(1) - 1/2) has alpha = 1 exactly
  auto tilt = RegressionControl::fit(functionals::expression("exp(x - 0.5)"), presets::brownian(),
                                     {1e6, 0.0, 1e6, 1}, grid, 40'000, RandomStream{2, 0});
  CHECK(tilt.alpha(3, 0.0) == doctest::Approx(1.0).epsilon(0.1));
}
