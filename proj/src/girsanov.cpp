#include "diffvar/girsanov.hpp"

#include <cmath>
#include <vector>

#include <fmt/core.h>

#include "diffvar/errors.hpp"
#include "diffvar/parallel.hpp"

namespace diffvar {

double log_wick(const CameronMartinShift& v, const RowMatrix& driver_increments) {
  if (driver_increments.rows() != v.density().rows() || driver_increments.cols() != v.density().cols())
    throw InvalidInput("shift and driver increments differ in shape");
  const double linear = v.density().cwiseProduct(driver_increments).sum();
  return linear - 0.5 * cm_norm_sq(v);
}

bool GirsanovEstimate::agrees(double n_se) const {
  return std::abs(lhs.value - rhs.value) <= n_se * combined_std_error(lhs, rhs);
}

namespace {

struct PathWork {
  RowMatrix inc;
  Path beta;
  Path x;
  Path xu;
  Path beta_u;
  EulerMaruyama em;
  PathWork(const CoefficientField& coeffs, const TimeGrid& grid)
      : beta(grid, coeffs.d()), x(grid, coeffs.m()), xu(grid, coeffs.m()), beta_u(grid, coeffs.d()), em(coeffs) {
    inc.resize(static_cast<Eigen::Index>(grid.n_steps()), static_cast<Eigen::Index>(coeffs.d()));
  }
  void draw(const RandomStream& s, const TimeGrid& grid) {
    fill_brownian_increments(s, grid, inc);
    for (Eigen::Index k = 0; k < inc.rows(); ++k) beta.values().row(k + 1) = beta.values().row(k) + inc.row(k);
    em.run(grid, inc, nullptr, x.values());
  }
};

void require_rule(const ShiftRule& u, const CoefficientField& coeffs) {
  if (u.dim() != coeffs.d()) throw InvalidInput("shift dimension must equal the driving dimension");
}

}  // namespace

GirsanovEstimate reweighted_expectation(const PathFunctional& f, const CoefficientField& coeffs, const ShiftRule& u,
                                        const TimeGrid& grid, std::size_t n_paths, const RandomStream& stream,
                                        const GirsanovOptions& options) {
  require_rule(u, coeffs);
  if (n_paths == 0) throw InvalidInput("n_paths must be positive");
  std::vector<double> lhs(n_paths), rhs(n_paths), weight(n_paths);
  std::vector<unsigned char> ok(n_paths, 1);
  const double sign = options.flip_wick_sign ? 1.0 : -1.0;
  parallel_chunks(n_paths, kDefaultChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    PathWork work(coeffs, grid);
    for (std::size_t i = begin; i < end; ++i) {
      work.draw(stream.offset(i), grid);
      const CameronMartinShift shift = realize(u, work.x, work.beta);
      work.em.run(grid, work.inc, &shift.density(), work.xu.values());
      work.beta_u.values() = work.beta.values() + integrate_density(shift).values();
      const double w = std::exp(log_wick(shift.scaled(sign), work.inc));
      lhs[i] = f(work.x, work.beta);
      rhs[i] = f(work.xu, work.beta_u) * w;
      weight[i] = w;
      ok[i] = std::isfinite(lhs[i]) && std::isfinite(rhs[i]) && std::isfinite(w);
    }
  });
  GirsanovEstimate out;
  std::vector<double> l, r, wt;
  l.reserve(n_paths);
  r.reserve(n_paths);
  wt.reserve(n_paths);
  for (std::size_t i = 0; i < n_paths; ++i) {
    if (!ok[i]) {
      ++out.rejected;
      continue;
    }
    l.push_back(lhs[i]);
    r.push_back(rhs[i]);
    wt.push_back(weight[i]);
  }
  if (static_cast<double>(out.rejected) > options.max_reject_fraction * static_cast<double>(n_paths))
    throw NumericalFailure(fmt::format("{} of {} reweighted samples were not finite", out.rejected, n_paths));
  out.lhs = estimate_mean(l);
  out.rhs = estimate_mean(r);
  out.weight = estimate_mean(wt);
  return out;
}

EstimateWithError entropy_if_invertible(const ShiftRule& u, const CoefficientField& coeffs, const TimeGrid& grid,
                                        std::size_t n_paths, const RandomStream& stream) {
  require_rule(u, coeffs);
  const Adaptedness a = u.adaptedness();
  if (a.kind == Adaptedness::Kind::markov_feedback ||
      (a.kind == Adaptedness::Kind::path_functional && a.delay == 0))
    throw InvalidInput(fmt::format("entropy_if_invertible needs a deterministic or strictly retarded shift, got {}",
                                   to_string(a.kind)));
  if (n_paths == 0) throw InvalidInput("n_paths must be positive");
  std::vector<double> half_energy(n_paths);
  parallel_chunks(n_paths, kDefaultChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    PathWork work(coeffs, grid);
    for (std::size_t i = begin; i < end; ++i) {
      if (a.kind == Adaptedness::Kind::deterministic && i > begin) {
        half_energy[i] = half_energy[begin];
        continue;
      }
      work.draw(stream.offset(i), grid);
      half_energy[i] = 0.5 * cm_norm_sq(realize(u, work.x, work.beta));
    }
  });
  return estimate_mean(half_energy);
}

EntropyBoundReport entropy_upper_bound_check(const ShiftRule& u, const CoefficientField& coeffs,
                                             const TimeGrid& grid, std::size_t n_paths,
                                             const RandomStream& stream) {
  require_rule(u, coeffs);
  if (n_paths == 0) throw InvalidInput("n_paths must be positive");
  std::vector<double> kl(n_paths), kinetic(n_paths);
  parallel_chunks(n_paths, kDefaultChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    PathWork work(coeffs, grid);
    for (std::size_t i = begin; i < end; ++i) {
      work.draw(stream.offset(i), grid);
      const CameronMartinShift shift = realize(u, work.x, work.beta);
      kl[i] = -log_wick(-shift, work.inc);
      kinetic[i] = 0.5 * cm_norm_sq(shift);
    }
  });
  EntropyBoundReport report;
  report.mode = "monte_carlo";
  report.kl = estimate_mean(kl);
  report.kinetic = estimate_mean(kinetic);
  report.tolerance = 3.0 * combined_std_error(report.kl, report.kinetic);
  report.holds = report.kl.value <= report.kinetic.value + report.tolerance;
  return report;
}

std::vector<double> pushforward_of_map(const TreePathMap& map, const TreePathMeasure& tree) {
  std::vector<double> q(tree.path_count(), 0.0);
  Path y(tree.grid(), tree.dim());
  for (std::size_t p = 0; p < tree.path_count(); ++p) {
    const Path w = tree.driver_path(p);
    map(w, y);
    q[tree.index_of(y)] += tree.path_probability();
  }
  return q;
}

EntropyBoundReport entropy_upper_bound_check(const TreePathMap& map, const TreePathMeasure& tree) {
  const double dt = tree.grid().dt();
  std::vector<double> q(tree.path_count(), 0.0);
  std::vector<double> energy(tree.path_count());
  Path y(tree.grid(), tree.dim());
  for (std::size_t p = 0; p < tree.path_count(); ++p) {
    const Path w = tree.driver_path(p);
    map(w, y);
    q[tree.index_of(y)] += tree.path_probability();
    const RowMatrix drift = y.increments() - w.increments();
    energy[p] = 0.5 * drift.squaredNorm() / dt;
  }
  EntropyBoundReport report;
  report.mode = "exact_tree";
  report.kl = {exact_relative_entropy(q, tree), 0.0, tree.path_count()};
  report.kinetic = {pairwise_sum(energy) * tree.path_probability(), 0.0, tree.path_count()};
  report.tolerance = 0.0;
  report.holds = report.kl.value <= report.kinetic.value + 1e-12;
  return report;
}

TreePathMap tanaka_map() {
  return [](const Path& w, Path& y) {
    if (w.dim() != 1) throw InvalidInput("the Tanaka map is defined in dimension 1");
    y.values().row(0).setZero();
    for (std::size_t k = 0; k < w.grid().n_steps(); ++k) {
      // w_k sits on the lattice h Z; compare against -h/2 so rounding in the
      // cumulative sum cannot flip the sign at 0.
      const double s = w.at(k, 0) > -0.5 * w.grid().sqrt_dt() ? 1.0 : -1.0;
      y.values()(static_cast<Eigen::Index>(k + 1), 0) =
          y.at(k, 0) + s * (w.at(k + 1, 0) - w.at(k, 0));
    }
  };
}

TreePathMap reflection_map() {
  return [](const Path& w, Path& y) {
    if (w.dim() != 1) throw InvalidInput("the reflection map is defined in dimension 1");
    const double half = 0.5 * w.grid().sqrt_dt();
    y.values().row(0).setZero();
    for (std::size_t k = 0; k < w.grid().n_steps(); ++k) {
      const double step = w.at(k + 1, 0) - w.at(k, 0);
      double dy = std::abs(step);
      if (w.at(k, 0) > half) dy = step;
      else if (w.at(k, 0) < -half) dy = -step;
      y.values()(static_cast<Eigen::Index>(k + 1), 0) = y.at(k, 0) + dy;
    }
  };
}

}  // namespace diffvar
