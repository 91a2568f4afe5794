#include <doctest.h>

#include <cmath>

#include "diffvar/errors.hpp"
#include "diffvar/variational.hpp"

using namespace diffvar;

TEST_CASE("direct free energy") {
  TimeGrid grid(8);
  auto c = estimate_free_energy(functionals::constant(2.25), presets::brownian(), grid, 500, RandomStream{1, 0});
  CHECK(c.estimate.value == doctest::Approx(2.25).epsilon(1e-14));
  CHECK(c.estimate.std_error == 0.0);

  // -log E e^{-W_1} = -1/2
  auto lin = estimate_free_energy(functionals::terminal_linear(1.0), presets::brownian(), grid, 100'000,
                                  RandomStream{2, 0});
  CHECK(std::abs(lin.estimate.value + 0.5) <= 4.0 * lin.estimate.std_error);
  CHECK(lin.log_bias > 0.0);
  CHECK(lin.log_bias < 1e-3);
}

TEST_CASE("objective of constant controls") {
  TimeGrid grid(8);
  auto family = ControlFamily::constant(1, grid, 10.0);
  CHECK(family.n_params() == 1);
  CHECK(std::string(family.invertibility()) == "structural");
  const RandomStream stream{3, 0};
  auto f = functionals::terminal_linear(1.0);
  auto base = objective(f, presets::brownian(), family, family.zero_params(), 4000, stream);
  for (double c : {-1.0, -0.3, 0.8}) {
    auto j = objective(f, presets::brownian(), family, Vector::Constant(1, c), 4000, stream);
    // common random numbers: J(c) - J(0) = c + c^2 / 2 path by path
    CHECK(j.estimate.value - base.estimate.value == doctest::Approx(c + 0.5 * c * c).epsilon(1e-12));
    CHECK(j.kinetic.value == doctest::Approx(0.5 * c * c));
  }
  auto clipped = objective(f, presets::brownian(), ControlFamily::constant(1, grid, 0.5), Vector::Constant(1, -2.0),
                           100, stream);
  CHECK(clipped.clipped_steps == 800);
  CHECK(clipped.kinetic.value == doctest::Approx(0.125));
}

TEST_CASE("pathwise gradient matches finite differences") {
  TimeGrid grid(6);
  auto coeffs = presets::sinusoidal();
  auto f = functionals::terminal_quadratic(0.7);
  const RandomStream stream{4, 0};
  for (const auto& family : {ControlFamily::linear_feedback(1, 1, grid, 50.0),
                             ControlFamily::piecewise_constant(1, 3, grid, 50.0),
                             ControlFamily::rbf_feedback(1, 1, {Vector::Constant(1, -0.5), Vector::Constant(1, 0.5)},
                                                         0.7, 2, grid, 50.0)}) {
    Vector params(static_cast<Eigen::Index>(family.n_params()));
    for (Eigen::Index i = 0; i < params.size(); ++i) params(i) = 0.1 * std::sin(1.0 + static_cast<double>(i));
    auto j = objective(f, coeffs, family, params, 300, stream, true);
    REQUIRE(j.gradient.size() == params.size());
    for (Eigen::Index i = 0; i < params.size(); ++i) {
      const double h = 1e-5;
      Vector up = params, down = params;
      up(i) += h;
      down(i) -= h;
      const double fd = (objective(f, coeffs, family, up, 300, stream).estimate.value -
                         objective(f, coeffs, family, down, 300, stream).estimate.value) /
                        (2 * h);
      CHECK(j.gradient(i) == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
    }
  }
}

TEST_CASE("optimizer finds the constant optimum") {
  TimeGrid grid(4);
  auto family = ControlFamily::constant(1, grid, 10.0);
  OptimizerOptions opts;
  opts.max_iter = 60;
  opts.paths_per_iter = 2000;
  opts.final_paths = 20'000;
  opts.grad_mode = GradientMode::pathwise;
  auto r = optimize(functionals::terminal_linear(1.0), presets::brownian(), family, opts, RandomStream{5, 0});
  CHECK(r.best_params(0) == doctest::Approx(-1.0).epsilon(0.1));
  CHECK(std::abs(r.j_star.value + 0.5) <= 4.0 * r.j_star.std_error + 0.01);
  CHECK(!r.violation);
  CHECK(r.invertibility == "structural");

  opts.grad_mode = GradientMode::spsa;
  auto s = optimize(functionals::terminal_linear(1.0), presets::brownian(), family, opts, RandomStream{5, 0});
  CHECK(s.best_params(0) == doctest::Approx(-1.0).epsilon(0.2));

  auto flat = optimize(functionals::constant(3.0), presets::brownian(), family, opts, RandomStream{6, 0});
  CHECK(flat.direct.estimate.value == 3.0);
  CHECK(flat.j_star.value >= 3.0);
  CHECK(flat.j_star.value <= 3.01);
}

TEST_CASE("tree attainment") {
  TreePathMeasure tree(TimeGrid(8), 1);
  auto f = evaluate_on_tree(functionals::terminal_quadratic(1.0), tree);
  auto dp = dp_adapted_infimum(f, tree);
  auto best = attainment_check(f, dp.kernels, tree);
  CHECK(best.total_variation <= 1e-12);
  CHECK(std::abs(best.excess) <= 1e-12);

  auto family = ControlFamily::constant(1, tree.grid(), 10.0);
  auto drift = family_drift_on_tree(family, Vector::Constant(1, 0.4), tree);
  for (std::size_t k = 0; k < 8; ++k) CHECK(drift.at(k, tree.nodes_at(k) - 1) == 0.4);
  auto other = attainment_check(f, tilt_kernels(drift, tree, TiltKind::exponential), tree);
  CHECK(other.excess > 0.0);
  CHECK(other.total_variation > 0.01);
  CHECK(other.free_energy == doctest::Approx(best.free_energy));
}

TEST_CASE("Monte Carlo attainment") {
  TimeGrid grid(8);
  auto family = ControlFamily::constant(1, grid, 10.0);
  auto f = functionals::terminal_linear(1.0);
  auto good = attainment_check(f, presets::brownian(), family, Vector::Constant(1, -1.0), 20'000, RandomStream{7, 0});
  auto bad = attainment_check(f, presets::brownian(), family, Vector::Constant(1, 1.0), 20'000, RandomStream{7, 0});
  CHECK(good.mode == "monte_carlo");
  CHECK(good.per_test.size() == 10);
  CHECK(good.statistic < 4.5);
  CHECK(bad.statistic > 10.0);
}
