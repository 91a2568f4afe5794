#include "diffvar/density_approx.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/core.h>

#include "diffvar/errors.hpp"
#include "diffvar/parallel.hpp"
#include "diffvar/statistics.hpp"

namespace diffvar {

void ApproximationParams::validate(std::size_t n_steps) const {
  if (!(n0 >= 1.0)) throw InvalidInput(fmt::format("truncation level n0 = {} must be >= 1", n0));
  if (!(a >= 0.0 && a <= 1.0)) throw InvalidInput(fmt::format("mixing weight a = {} must lie in [0, 1]", a));
  if (!(n >= 1.0)) throw InvalidInput(fmt::format("energy cap n = {} must be >= 1", n));
  if (eta < 1 || eta > n_steps)
    throw InvalidInput(fmt::format("delay eta = {} must lie in [1, {}]", eta, n_steps));
}

namespace {

double x_log_x(double v) { return v > 0.0 ? v * std::log(v) : 0.0; }

double mean_over_tree(std::span<const double> v, const TreePathMeasure& tree) {
  return pairwise_sum(v) * tree.path_probability();
}

double l1_distance(const std::vector<double>& a, const std::vector<double>& b, const TreePathMeasure& tree) {
  std::vector<double> diff(a.size());
  for (std::size_t p = 0; p < a.size(); ++p) diff[p] = std::abs(a[p] - b[p]);
  return mean_over_tree(diff, tree);
}

std::vector<double> map_values(std::span<const double> v, double (*fn)(double)) {
  std::vector<double> out(v.size());
  for (std::size_t p = 0; p < v.size(); ++p) out[p] = fn(v[p]);
  return out;
}

// Density of the additive tree martingale with representation `drift`:
// prod_k (1 + sqrt(dt) drift_k s_k) along each path.
std::vector<double> product_density(const NodeFunction& drift, const TreePathMeasure& tree) {
  const double h = tree.grid().sqrt_dt();
  std::vector<double> out(tree.path_count());
  for (std::size_t p = 0; p < out.size(); ++p) {
    double value = 1.0;
    for (std::size_t k = 0; k < tree.n_steps(); ++k) {
      const double s = tree.step_code(p, k) ? 1.0 : -1.0;
      value *= 1.0 + h * drift.at(k, tree.ancestor(p, k)) * s;
    }
    out[p] = value;
  }
  return out;
}

}  // namespace

std::vector<double> truncate_normalize(std::span<const double> L, double n0, const TreePathMeasure& tree) {
  if (L.size() != tree.path_count()) throw InvalidInput("density size does not match the tree");
  std::vector<double> phi(L.size());
  for (std::size_t p = 0; p < L.size(); ++p) {
    if (!(L[p] >= 0.0) || !std::isfinite(L[p]))
      throw InvalidInput(fmt::format("density must be finite and non-negative (path {})", p));
    phi[p] = std::min(L[p], n0);
  }
  const double mean = mean_over_tree(phi, tree);
  if (!(mean > 0.0)) throw InvalidInput("truncated density has zero mean");
  for (double& v : phi) v /= mean;
  return phi;
}

std::vector<double> mix(std::span<const double> L, double a) {
  if (!(a >= 0.0 && a <= 1.0)) throw InvalidInput(fmt::format("mixing weight a = {} must lie in [0, 1]", a));
  std::vector<double> out(L.size());
  for (std::size_t p = 0; p < L.size(); ++p) out[p] = (L[p] + a) / (1.0 + a);
  return out;
}

PipelineResult build_control(std::span<const double> L, const ApproximationParams& params,
                             const TreePathMeasure& tree) {
  if (tree.dim() != 1) throw InvalidInput("the density pipeline runs on dim-1 trees");
  params.validate(tree.n_steps());
  const std::size_t n = tree.n_steps();
  const double dt = tree.grid().dt();
  const std::vector<double> target(L.begin(), L.end());

  const std::vector<double> truncated = truncate_normalize(L, params.n0, tree);
  const std::vector<double> mixed = mix(truncated, params.a);
  const NodeFunction M = doob_martingale(mixed, tree);
  const NodeFunction alpha = martingale_representation(M, tree).alpha;

  // Energy cap: step j is kept while the running energy through step j stays <= n.
  NodeFunction capped(tree, n - 1);
  NodeFunction running(tree, n);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j) {
      const double a = alpha.at(k, j);
      const double r = running.at(k, j) + a * a * dt;
      capped.at(k, j) = r <= params.n ? a : 0.0;
      for (std::size_t c = 0; c < 2; ++c) running.at(k + 1, 2 * j + c) = r;
    }
  }

  PipelineResult result;
  result.control.delay = params.eta;
  result.control.gamma = NodeFunction(tree, n - 1);
  for (std::size_t k = params.eta; k < n; ++k)
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j)
      result.control.gamma.at(k, j) = capped.at(k - params.eta, j >> params.eta);

  // N^eta through the pushforward of the linear tilt, checked against the product form.
  std::vector<double> q = pushforward_measure(result.control.gamma, tree, TiltKind::linear);
  const double count = static_cast<double>(tree.path_count());
  for (double& v : q) v *= count;
  const std::vector<double> direct = product_density(result.control.gamma, tree);
  for (std::size_t p = 0; p < q.size(); ++p)
    if (std::abs(q[p] - direct[p]) > 1e-9 * (1.0 + direct[p]))
      throw NumericalFailure(fmt::format("pushforward and product densities disagree on path {}", p));
  result.density = std::move(q);

  const std::vector<double> stopped = product_density(capped, tree);

  auto& diag = result.diagnostics;
  const auto target_xlogx = map_values(target, x_log_x);
  const auto density_xlogx = map_values(result.density, x_log_x);
  diag.l1_LlogL = l1_distance(density_xlogx, target_xlogx, tree);
  {
    std::vector<double> diff(target.size());
    for (std::size_t p = 0; p < target.size(); ++p) {
      if (target[p] > 0.0)
        diff[p] = std::abs((result.density[p] - target[p]) * std::log(target[p]));
      else
        diff[p] = result.density[p] > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    }
    diag.l1_logL = mean_over_tree(diff, tree);
  }
  diag.mean_density = mean_over_tree(result.density, tree);
  for (std::size_t p = 0; p < tree.path_count(); ++p) {
    double e = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double g = result.control.gamma.at(k, tree.ancestor(p, k));
      e += g * g * dt;
    }
    diag.energy = std::max(diag.energy, e);
  }
  const auto truncated_xlogx = map_values(truncated, x_log_x);
  const auto mixed_xlogx = map_values(mixed, x_log_x);
  const auto stopped_xlogx = map_values(stopped, x_log_x);
  diag.stage_errors = {l1_distance(truncated_xlogx, target_xlogx, tree), l1_distance(mixed_xlogx, truncated_xlogx, tree),
                       l1_distance(stopped_xlogx, mixed_xlogx, tree), l1_distance(density_xlogx, stopped_xlogx, tree)};
  return result;
}

Path apply_retarded_shift(const RetardedTreeControl& control, const TreePathMeasure& tree, std::size_t path) {
  const Path w = tree.driver_path(path);
  Path y(tree.grid(), 1);
  const double dt = tree.grid().dt();
  for (std::size_t k = 0; k < tree.n_steps(); ++k)
    y.values()(static_cast<Eigen::Index>(k + 1), 0) =
        y.at(k, 0) + (w.at(k + 1, 0) - w.at(k, 0)) - control.gamma.at(k, tree.ancestor(path, k)) * dt;
  return y;
}

std::size_t invert_retarded(const RetardedTreeControl& control, const TreePathMeasure& tree, const Path& observed) {
  if (control.delay == 0) throw InvalidInput("a shift with delay 0 cannot be inverted block by block");
  if (tree.dim() != 1 || observed.dim() != 1 || !(observed.grid() == tree.grid()))
    throw InvalidInput("observed path does not live on this tree");
  const double h = tree.grid().sqrt_dt();
  const double dt = tree.grid().dt();
  std::size_t node = 0;
  for (std::size_t k = 0; k < tree.n_steps(); ++k) {
    // gamma on level k reads the node at level k - delay, already recovered.
    const double dw = observed.at(k + 1, 0) - observed.at(k, 0) + control.gamma.at(k, node) * dt;
    const bool up = dw > 0.0;
    if (std::abs(std::abs(dw) - h) > 1e-9 * (1.0 + h))
      throw InvalidInput(fmt::format("observed path is not in the image of the shift (step {})", k));
    node = 2 * node + (up ? 1 : 0);
  }
  return node;
}

PerturbedPair invert_retarded(const CoefficientField& coeffs, const ShiftRule& gamma, const Path& x_observed,
                              const Path& beta_observed) {
  const Adaptedness a = gamma.adaptedness();
  if (a.kind != Adaptedness::Kind::path_functional || a.delay == 0) {
    if (a.kind != Adaptedness::Kind::deterministic)
      throw InvalidInput("inversion needs a deterministic or strictly retarded shift");
  }
  if (gamma.dim() != coeffs.d() || beta_observed.dim() != coeffs.d() || x_observed.dim() != coeffs.m())
    throw InvalidInput("dimensions do not match the coefficients");
  const TimeGrid& grid = beta_observed.grid();
  const auto m = static_cast<Eigen::Index>(coeffs.m());
  const auto d = static_cast<Eigen::Index>(coeffs.d());
  const double dt = grid.dt();
  Path x(grid, coeffs.m());
  Path beta(grid, coeffs.d());
  x.node(0) = coeffs.initial_point().transpose();
  Matrix sigma(m, d);
  Vector drift(m), state(m), rate(d), dbeta(d);
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    const std::size_t visible = visible_nodes(a, k);
    rate.setZero();
    gamma.density(k, HistoryView(x, visible), HistoryView(beta, visible), rate);
    dbeta = (beta_observed.node(k + 1) - beta_observed.node(k)).transpose() + rate * dt;
    beta.node(k + 1) = beta.node(k) + dbeta.transpose();
    state = x.node(k).transpose();
    coeffs.sigma(state, sigma);
    coeffs.drift(state, drift);
    x.node(k + 1) = (state + sigma * dbeta + drift * dt).transpose();
  }
  return {std::move(x), std::move(beta)};
}

namespace {

void features(double x, std::size_t degree, Eigen::Ref<Vector> out) {
  double power = 1.0;
  for (std::size_t i = 0; i <= degree; ++i) {
    out(static_cast<Eigen::Index>(i)) = power;
    power *= x;
  }
}

}  // namespace

RegressionControl RegressionControl::fit(const PathFunctional& L, const CoefficientField& coeffs,
                                         const ApproximationParams& params, const TimeGrid& grid,
                                         std::size_t n_paths, const RandomStream& stream, std::size_t degree) {
  if (coeffs.m() != 1 || coeffs.d() != 1) throw InvalidInput("regression control needs m = d = 1");
  params.validate(grid.n_steps());
  if (n_paths < 10 * (degree + 1)) throw InvalidInput("too few paths for the regression");
  const std::size_t n = grid.n_steps();
  RowMatrix states(static_cast<Eigen::Index>(n_paths), static_cast<Eigen::Index>(n + 1));
  RowMatrix incs(static_cast<Eigen::Index>(n_paths), static_cast<Eigen::Index>(n));
  std::vector<double> density(n_paths);
  parallel_chunks(n_paths, kDefaultChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    EulerMaruyama em(coeffs);
    RowMatrix inc(static_cast<Eigen::Index>(n), 1);
    Path beta(grid, 1), x(grid, 1);
    for (std::size_t i = begin; i < end; ++i) {
      fill_brownian_increments(stream.offset(i), grid, inc);
      for (Eigen::Index k = 0; k < inc.rows(); ++k) beta.values()(k + 1, 0) = beta.values()(k, 0) + inc(k, 0);
      em.run(grid, inc, nullptr, x.values());
      states.row(static_cast<Eigen::Index>(i)) = x.values().col(0).transpose();
      incs.row(static_cast<Eigen::Index>(i)) = inc.col(0).transpose();
      density[i] = L(x, beta);
      if (!(density[i] >= 0.0) || !std::isfinite(density[i]))
        throw InvalidInput(fmt::format("target density is negative or not finite on sample {}", i));
    }
  });
  // Empirical versions of truncate_normalize and mix.
  const double raw_mean = pairwise_sum(density) / static_cast<double>(n_paths);
  if (!(raw_mean > 0.0)) throw InvalidInput("target density has zero sample mean");
  for (double& v : density) v = std::min(v / raw_mean, params.n0);
  const double trunc_mean = pairwise_sum(density) / static_cast<double>(n_paths);
  for (double& v : density) v = (v / trunc_mean + params.a) / (1.0 + params.a);

  RegressionControl out;
  out.params_ = params;
  out.grid_ = grid;
  out.degree_ = degree;
  out.floor_ = params.a / (1.0 + params.a);
  const auto p = static_cast<Eigen::Index>(degree + 1);
  Matrix design(static_cast<Eigen::Index>(n_paths), p);
  Vector target_m(static_cast<Eigen::Index>(n_paths)), target_c(static_cast<Eigen::Index>(n_paths));
  Vector phi(p);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < n_paths; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      features(states(row, static_cast<Eigen::Index>(k)), degree, phi);
      design.row(row) = phi.transpose();
      target_m(row) = density[i];
      target_c(row) = density[i] * incs(row, static_cast<Eigen::Index>(k)) / grid.dt();
    }
    const auto qr = design.colPivHouseholderQr();
    out.m_coef_.push_back(qr.solve(target_m));
    out.c_coef_.push_back(qr.solve(target_c));
  }
  return out;
}

double RegressionControl::alpha(std::size_t k, double x) const {
  Vector phi(static_cast<Eigen::Index>(degree_ + 1));
  features(x, degree_, phi);
  const double m = std::max(m_coef_.at(k).dot(phi), floor_ > 0.0 ? floor_ : 1e-12);
  return c_coef_.at(k).dot(phi) / m;
}

RetardedRule RegressionControl::rule() const {
  const RegressionControl self = *this;
  return RetardedRule(1, params_.eta, [self](std::size_t k, const HistoryView& x, const HistoryView&,
                                             Eigen::Ref<Vector> out) {
    out(0) = 0.0;
    const std::size_t eta = self.params_.eta;
    if (k < eta) return;
    const double dt = self.grid_.dt();
    double running = 0.0;
    for (std::size_t j = 0; j <= k - eta; ++j) {
      const double a = self.alpha(j, x.at(j, 0));
      running += a * a * dt;
      if (running > self.params_.n) return;  // stopped at or before step k - eta
      if (j == k - eta) out(0) = a;
    }
  });
}

}  // namespace diffvar
