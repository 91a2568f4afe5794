#include <doctest.h>

#include <cmath>
#include <random>

#include "diffvar/discrete_oracle.hpp"
#include "diffvar/errors.hpp"
#include "diffvar/statistics.hpp"

using namespace diffvar;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double scale = 2.0) {
  SplitMix64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

const double kLogCosh1 = std::log(std::cosh(1.0));

}  // namespace

TEST_CASE("tree layout") {
  TreePathMeasure tree(TimeGrid(3), 2);
  CHECK(tree.branching() == 4);
  CHECK(tree.path_count() == 64);
  CHECK(tree.path_probability() == 1.0 / 64);
  const std::size_t path = 0b10'01'11;
  CHECK(tree.step_code(path, 0) == 0b10);
  CHECK(tree.step_code(path, 2) == 0b11);
  CHECK(tree.ancestor(path, 1) == 0b10);
  CHECK(tree.ancestor(path, 3) == path);
  Path w = tree.driver_path(path);
  const double h = std::sqrt(1.0 / 3.0);
  CHECK(w.at(1, 0) == doctest::Approx(-h));
  CHECK(w.at(1, 1) == doctest::Approx(h));
  CHECK(tree.index_of(w) == path);
  CHECK_THROWS_AS(TreePathMeasure(TimeGrid(12), 2), InvalidInput);
  CHECK_NOTHROW(TreePathMeasure(TimeGrid(11), 2));

  // increments have mean 0 and covariance dt I exactly
  RowMatrix inc;
  Matrix cov = Matrix::Zero(2, 2);
  Vector mean = Vector::Zero(2);
  for (std::size_t p = 0; p < tree.path_count(); ++p) {
    tree.increments(p, inc);
    mean += inc.row(1).transpose();
    cov += inc.row(1).transpose() * inc.row(1);
  }
  CHECK(mean.norm() <= 1e-15);
  CHECK((cov / 64.0 - Matrix::Identity(2, 2) / 3.0).norm() <= 1e-15);
}

TEST_CASE("free energy hand values") {
  TreePathMeasure one(TimeGrid(1), 1);
  auto w1 = evaluate_on_tree(functionals::terminal_linear(1.0), one);
  CHECK(exact_free_energy(w1, one) == doctest::Approx(-kLogCosh1).epsilon(1e-15));
  auto sq = evaluate_on_tree(functionals::terminal_quadratic(1.0), one);
  CHECK(exact_free_energy(sq, one) == doctest::Approx(1.0).epsilon(1e-15));
  TreePathMeasure tree(TimeGrid(6), 2);
  std::vector<double> c(tree.path_count(), 2.5);
  CHECK(exact_free_energy(c, tree) == doctest::Approx(2.5).epsilon(1e-15));
  c[17] = std::nan("");
  CHECK_THROWS_WITH_AS(exact_free_energy(c, tree), doctest::Contains("17"), InvalidInput);
}

TEST_CASE("Gibbs principle") {
  TreePathMeasure one(TimeGrid(1), 1);
  auto f = evaluate_on_tree(functionals::terminal_linear(1.0), one);
  auto report = gibbs_check(f, one);
  CHECK(report.free_energy == doctest::Approx(-kLogCosh1));
  CHECK(report.residual <= 1e-12);
  CHECK(report.theta0[1] == doctest::Approx(std::exp(-1.0) / (std::exp(1.0) + std::exp(-1.0))).epsilon(1e-14));
  CHECK(report.theta0[1] == doctest::Approx(0.1192029).epsilon(1e-6));
  CHECK(report.n_below == 0);
  // rearranged Gibbs identity for the relative entropy
  CHECK(exact_relative_entropy(report.theta0, one) ==
        doctest::Approx(-kLogCosh1 - expectation(report.theta0, f)).epsilon(1e-14));

  std::vector<double> zero(one.path_count(), 0.0);
  auto z = gibbs_check(zero, one);
  CHECK(z.gibbs_value == 0.0);
  CHECK(z.theta0[0] == 0.5);

  TreePathMeasure tree(TimeGrid(12), 1);
  auto r = gibbs_check(random_values(tree.path_count(), 3), tree);
  CHECK(r.residual <= 1e-12);
  CHECK(r.n_below == 0);
  CHECK(r.min_perturbed >= r.free_energy - 1e-12);
}

TEST_CASE("relative entropy examples") {
  TreePathMeasure tree(TimeGrid(3), 1);
  std::vector<double> p(8, 1.0 / 8), point(8, 0.0);
  point[5] = 1.0;
  CHECK(exact_relative_entropy(p, tree) == doctest::Approx(0.0));
  CHECK(exact_relative_entropy(point, tree) == doctest::Approx(std::log(8.0)).epsilon(1e-15));
}

TEST_CASE("dynamic programming matches enumeration") {
  TreePathMeasure one(TimeGrid(1), 1);
  auto dp = dp_adapted_infimum(evaluate_on_tree(functionals::terminal_linear(1.0), one), one);
  CHECK(dp.value == doctest::Approx(-kLogCosh1).epsilon(1e-15));
  CHECK(dp.kernels.at(0, 0, 1) == doctest::Approx(std::exp(-1.0) / (std::exp(1.0) + std::exp(-1.0))));

  TreePathMeasure two(TimeGrid(2), 1);
  auto sq = evaluate_on_tree(functionals::terminal_quadratic(1.0), two);
  CHECK(std::abs(dp_adapted_infimum(sq, two).value - exact_free_energy(sq, two)) <= 1e-12);

  std::vector<double> c(two.path_count(), -0.75);
  auto flat = dp_adapted_infimum(c, two);
  CHECK(flat.value == doctest::Approx(-0.75));
  for (std::size_t j = 0; j < 2; ++j) CHECK(flat.kernels.at(1, j, 0) == doctest::Approx(0.5));

  for (std::size_t dim : {1u, 2u, 4u}) {
    TreePathMeasure tree(TimeGrid(12 / dim), dim);
    for (std::uint64_t s = 0; s < 5; ++s) {
      auto f = random_values(tree.path_count(), 100 + s);
      auto r = dp_adapted_infimum(f, tree);
      CHECK(std::abs(r.value - exact_free_energy(f, tree)) <= 1e-10);
      // forward evaluation of the optimal kernels gives the same value
      CHECK(std::abs(adapted_objective(f, r.kernels, tree) - r.value) <= 1e-10);
      // and their law is the Gibbs measure
      auto q = kernel_path_measure(r.kernels, tree);
      auto theta = gibbs_measure(f, tree);
      double tv = 0;
      for (std::size_t p = 0; p < q.size(); ++p) tv += std::abs(q[p] - theta[p]);
      CHECK(tv <= 1e-12);
    }
  }
}

TEST_CASE("suboptimal kernels cost more") {
  TreePathMeasure tree(TimeGrid(8), 1);
  auto f = random_values(tree.path_count(), 9);
  auto base = dp_adapted_infimum(f, tree);
  NodeFunction uniform(tree, 7, 2);
  for (std::size_t k = 0; k < 8; ++k)
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j) uniform.at(k, j, 0) = uniform.at(k, j, 1) = 0.5;
  CHECK(adapted_objective(f, uniform, tree) >= base.value);
  CHECK(adapted_objective(f, uniform, tree) == doctest::Approx(expectation(std::vector<double>(256, 1.0 / 256), f)));
}

TEST_CASE("pushforward under a tilt") {
  TreePathMeasure tree(TimeGrid(4), 1);
  auto zero = pushforward_measure(CameronMartinShift::zero(tree.grid(), 1), tree);
  for (double q : zero) CHECK(q == 1.0 / 16);

  const double a = 0.8, h = 0.5;
  RowMatrix rates = RowMatrix::Zero(4, 1);
  rates(2, 0) = a;
  auto q = pushforward_measure(CameronMartinShift(tree.grid(), rates), tree);
  const double up = std::exp(a * h) / (std::exp(a * h) + std::exp(-a * h));
  for (std::size_t p = 0; p < 16; ++p) {
    const double expected = (tree.step_code(p, 2) ? up : 1.0 - up) / 8.0;
    CHECK(q[p] == doctest::Approx(expected).epsilon(1e-15));
  }
  double total = 0;
  for (double v : q) total += v;
  CHECK(std::abs(total - 1.0) <= 1e-14);

  NodeFunction wild(tree, 3, 1);
  wild.at(1, 1) = 5.0;
  CHECK_THROWS_WITH_AS(tilt_kernels(wild, tree, TiltKind::linear), doctest::Contains("level 1 node 1"), InvalidInput);
}

TEST_CASE("tilt entropy versus kinetic energy") {
  // KL <= kinetic energy for every drift; equality for deterministic drift up to O(dt).
  double previous_gap = 0;
  for (std::size_t n : {4u, 8u, 16u}) {
    TreePathMeasure tree(TimeGrid(n), 1);
    auto shift = CameronMartinShift::constant(tree.grid(), Vector::Constant(1, 1.5));
    auto drift = drift_from_shift(shift, tree);
    auto q = pushforward_measure(drift, tree);
    const double kl = exact_relative_entropy(q, tree);
    const double ke = tilt_kinetic_energy(drift, q, tree);
    CHECK(ke == doctest::Approx(0.5 * 1.5 * 1.5));
    CHECK(kl <= ke);
    const double gap = ke - kl;
    CHECK(gap > 0);
    if (previous_gap > 0) CHECK(previous_gap / gap == doctest::Approx(2.0).epsilon(0.2));
    previous_gap = gap;
  }
  TreePathMeasure tree(TimeGrid(10), 1);
  NodeFunction drift(tree, 9, 1);
  SplitMix64 rng(4);
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  for (std::size_t k = 0; k < 10; ++k)
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j) drift.at(k, j) = unif(rng);
  auto q = pushforward_measure(drift, tree);
  CHECK(exact_relative_entropy(q, tree) <= tilt_kinetic_energy(drift, q, tree));
  CHECK(exact_relative_entropy(q, tree) > 0.0);
}

TEST_CASE("Doob martingale and its representation") {
  TreePathMeasure one(TimeGrid(1), 1);
  std::vector<double> L{0.5, 1.5};
  auto M = doob_martingale(L, one);
  CHECK(M.at(0, 0) == 1.0);
  auto rep = martingale_representation(M, one);
  CHECK(rep.alpha.at(0, 0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(doob_martingale(std::vector<double>{1.0, 1.5}, one), InvalidInput);

  auto ones = doob_martingale(std::vector<double>(4, 1.0), TreePathMeasure(TimeGrid(2), 1));
  CHECK(martingale_representation(ones, TreePathMeasure(TimeGrid(2), 1)).alpha.at(1, 1) == 0.0);

  TreePathMeasure tree(TimeGrid(10), 1);
  auto raw = random_values(tree.path_count(), 12, 1.0);
  double total = 0;
  for (double& v : raw) {
    v = std::exp(v);
    total += v;
  }
  double lo = 1e300, hi = 0;
  for (double& v : raw) {
    v *= static_cast<double>(raw.size()) / total;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  // rescale so that the mean is exactly 1 in floating point
  const double mean = pairwise_sum(raw) / static_cast<double>(raw.size());
  for (double& v : raw) v /= mean;
  auto mart = doob_martingale(raw, tree);
  CHECK(mart.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  double worst = 0;
  for (std::size_t k = 0; k < 10; ++k)
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j)
      worst = std::max(worst, std::abs(0.5 * (mart.at(k + 1, 2 * j) + mart.at(k + 1, 2 * j + 1)) - mart.at(k, j)));
  CHECK(worst <= 1e-14);

  auto alpha = martingale_representation(mart, tree);
  CHECK(alpha.max_residual == 0.0);
  auto back = reconstruct_martingale(alpha.alpha, tree, mart.at(0, 0));
  for (std::size_t p = 0; p < tree.path_count(); ++p)
    CHECK(back.at(10, p) == doctest::Approx(raw[p]).epsilon(1e-12));
  // energy bound 2 (D^2 + 1) / d^2 with d, D the bounds of M
  CHECK(representation_energy(alpha.alpha, tree) <= 2.0 * (hi * hi + 1.0) / (lo * lo));
}

TEST_CASE("multidimensional representation is a projection") {
  TreePathMeasure tree(TimeGrid(3), 2);
  std::vector<double> L(tree.path_count());
  for (std::size_t p = 0; p < L.size(); ++p) L[p] = 1.0 + 0.3 * std::sin(static_cast<double>(p));
  const double mean = pairwise_sum(L) / static_cast<double>(L.size());
  for (double& v : L) v /= mean;
  auto rep = martingale_representation(doob_martingale(L, tree), tree);
  CHECK(rep.alpha.width() == 2);
  CHECK(rep.max_residual > 0.0);
  // densities whose one-step ratios are affine in the increments are represented exactly
  std::vector<double> prod(tree.path_count());
  for (std::size_t p = 0; p < prod.size(); ++p) {
    double v = 1.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const auto c = tree.step_code(p, k);
      v *= 1.0 + (c & 1 ? 0.2 : -0.2) + (c & 2 ? -0.1 : 0.1);
    }
    prod[p] = v;
  }
  CHECK(martingale_representation(doob_martingale(prod, tree), tree).max_residual <= 1e-14);
}
