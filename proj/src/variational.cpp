#include "diffvar/variational.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include <fmt/core.h>

#include "diffvar/errors.hpp"
#include "diffvar/parallel.hpp"

namespace diffvar {

// ---------------------------------------------------------------------------
// Free energy

namespace {

struct DriverWork {
  RowMatrix inc;
  Path beta;
  Path x;
  EulerMaruyama em;
  DriverWork(const CoefficientField& coeffs, const TimeGrid& grid)
      : beta(grid, coeffs.d()), x(grid, coeffs.m()), em(coeffs) {
    inc.resize(static_cast<Eigen::Index>(grid.n_steps()), static_cast<Eigen::Index>(coeffs.d()));
  }
  void draw(const RandomStream& s, const TimeGrid& grid) {
    fill_brownian_increments(s, grid, inc);
    for (Eigen::Index k = 0; k < inc.rows(); ++k) beta.values().row(k + 1) = beta.values().row(k) + inc.row(k);
    em.run(grid, inc, nullptr, x.values());
  }
};

std::vector<double> sample_functional(const PathFunctional& f, const CoefficientField& coeffs, const TimeGrid& grid,
                                      std::size_t n_paths, const RandomStream& stream) {
  std::vector<double> values(n_paths);
  parallel_chunks(n_paths, kDefaultChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    DriverWork work(coeffs, grid);
    for (std::size_t i = begin; i < end; ++i) {
      work.draw(stream.offset(i), grid);
      values[i] = f(work.x, work.beta);
    }
  });
  return values;
}

}  // namespace

FreeEnergyEstimate estimate_free_energy(const PathFunctional& f, const CoefficientField& coeffs,
                                        const TimeGrid& grid, std::size_t n_paths, const RandomStream& stream) {
  if (n_paths == 0) throw InvalidInput("n_paths must be positive");
  std::vector<double> values = sample_functional(f, coeffs, grid, n_paths, stream);
  FreeEnergyEstimate out;
  std::vector<double> finite;
  finite.reserve(n_paths);
  for (double v : values) {
    if (std::isfinite(v))
      finite.push_back(v);
    else
      ++out.rejected;
  }
  if (finite.empty()) throw NumericalFailure("every free-energy sample was rejected as non-finite");
  const double fmin = *std::min_element(finite.begin(), finite.end());
  for (double& v : finite) v = std::exp(-(v - fmin));
  const EstimateWithError w = estimate_mean(finite);
  out.estimate.value = fmin - std::log(w.value);
  out.estimate.std_error = w.std_error / w.value;
  out.estimate.n_samples = w.n_samples;
  // E[-log w_bar] ~ -log E[w] + Var(w) / (2 n E[w]^2)
  out.log_bias = 0.5 * out.estimate.std_error * out.estimate.std_error;
  return out;
}

// ---------------------------------------------------------------------------
// Control families

ControlFamily::ControlFamily(Kind kind, std::size_t m, std::size_t d, const TimeGrid& grid, double clip_bound)
    : kind_(kind), m_(m), d_(d), grid_(grid), clip_bound_(clip_bound) {
  if (m_ == 0 || d_ == 0) throw InvalidInput("control dimensions must be positive");
  if (!(clip_bound_ > 0.0)) throw InvalidInput("clip bound must be positive");
}

ControlFamily ControlFamily::constant(std::size_t d, const TimeGrid& grid, double clip_bound) {
  ControlFamily fam(Kind::constant, 1, d, grid, clip_bound);
  fam.n_params_ = d;
  fam.metric_ = Vector::Ones(static_cast<Eigen::Index>(d));
  return fam;
}

ControlFamily ControlFamily::piecewise_constant(std::size_t d, std::size_t segments, const TimeGrid& grid,
                                                double clip_bound) {
  if (segments == 0 || segments > grid.n_steps())
    throw InvalidInput(fmt::format("segments must lie in [1, {}]", grid.n_steps()));
  ControlFamily fam(Kind::piecewise_constant, 1, d, grid, clip_bound);
  fam.blocks_ = segments;
  fam.n_params_ = segments * d;
  fam.metric_ = Vector::Zero(static_cast<Eigen::Index>(fam.n_params_));
  for (std::size_t k = 0; k < grid.n_steps(); ++k)
    for (std::size_t i = 0; i < d; ++i) fam.metric_(static_cast<Eigen::Index>(fam.block(k) * d + i)) += grid.dt();
  return fam;
}

ControlFamily ControlFamily::linear_feedback(std::size_t m, std::size_t d, const TimeGrid& grid, double clip_bound) {
  ControlFamily fam(Kind::linear_feedback, m, d, grid, clip_bound);
  fam.blocks_ = grid.n_steps();
  fam.n_params_ = grid.n_steps() * (d * m + d);
  fam.metric_ = Vector::Constant(static_cast<Eigen::Index>(fam.n_params_), grid.dt());
  return fam;
}

ControlFamily ControlFamily::rbf_feedback(std::size_t m, std::size_t d, std::vector<Vector> centers, double width,
                                         std::size_t slices, const TimeGrid& grid, double clip_bound) {
  if (centers.empty()) throw InvalidInput("rbf family needs at least one center");
  for (const auto& c : centers)
    if (static_cast<std::size_t>(c.size()) != m) throw InvalidInput("rbf center has the wrong dimension");
  if (!(width > 0.0)) throw InvalidInput("rbf width must be positive");
  if (slices == 0 || slices > grid.n_steps())
    throw InvalidInput(fmt::format("slices must lie in [1, {}]", grid.n_steps()));
  ControlFamily fam(Kind::rbf_feedback, m, d, grid, clip_bound);
  fam.blocks_ = slices;
  fam.centers_ = std::move(centers);
  fam.width_ = width;
  const std::size_t per_slice = d * fam.centers_.size();
  fam.n_params_ = slices * per_slice;
  fam.metric_ = Vector::Zero(static_cast<Eigen::Index>(fam.n_params_));
  for (std::size_t k = 0; k < grid.n_steps(); ++k)
    fam.metric_.segment(static_cast<Eigen::Index>(fam.block(k) * per_slice), static_cast<Eigen::Index>(per_slice))
        .array() += grid.dt();
  return fam;
}

std::string ControlFamily::kind_name() const {
  switch (kind_) {
    case Kind::constant:
      return "constant";
    case Kind::piecewise_constant:
      return "piecewise_constant";
    case Kind::linear_feedback:
      return "linear_feedback";
    case Kind::rbf_feedback:
      return "rbf_feedback";
  }
  return "unknown";
}

std::size_t ControlFamily::block(std::size_t k) const {
  if (kind_ == Kind::constant) return 0;
  return k * blocks_ / grid_.n_steps();
}

void ControlFamily::raw(const Vector& params, std::size_t k, const Eigen::Ref<const Vector>& x,
                        Eigen::Ref<Vector> out) const {
  const auto d = static_cast<Eigen::Index>(d_);
  const auto m = static_cast<Eigen::Index>(m_);
  switch (kind_) {
    case Kind::constant:
      out = params.head(d);
      return;
    case Kind::piecewise_constant:
      out = params.segment(static_cast<Eigen::Index>(block(k)) * d, d);
      return;
    case Kind::linear_feedback: {
      const Eigen::Index base = static_cast<Eigen::Index>(k) * (d * m + d);
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> A(
          params.data() + base, d, m);
      out.noalias() = A * x;
      out += params.segment(base + d * m, d);
      return;
    }
    case Kind::rbf_feedback: {
      const auto J = static_cast<Eigen::Index>(centers_.size());
      const Eigen::Index base = static_cast<Eigen::Index>(block(k)) * d * J;
      out.setZero();
      for (Eigen::Index j = 0; j < J; ++j) {
        const double phi = std::exp(-(x - centers_[static_cast<std::size_t>(j)]).squaredNorm() / (2.0 * width_ * width_));
        out += params.segment(base + j * d, d) * phi;
      }
      return;
    }
  }
}

bool ControlFamily::evaluate(const Vector& params, std::size_t k, const Eigen::Ref<const Vector>& x,
                             Eigen::Ref<Vector> out) const {
  raw(params, k, x, out);
  const double norm = out.norm();
  if (norm > clip_bound_) {
    out *= clip_bound_ / norm;
    return true;
  }
  return false;
}

void ControlFamily::accumulate_param_gradient(const Vector& params, std::size_t k, const Eigen::Ref<const Vector>& x,
                                              const Eigen::Ref<const Vector>& xi, Eigen::Ref<Vector> grad) const {
  (void)params;
  const auto d = static_cast<Eigen::Index>(d_);
  const auto m = static_cast<Eigen::Index>(m_);
  switch (kind_) {
    case Kind::constant:
      grad.head(d) += xi;
      return;
    case Kind::piecewise_constant:
      grad.segment(static_cast<Eigen::Index>(block(k)) * d, d) += xi;
      return;
    case Kind::linear_feedback: {
      const Eigen::Index base = static_cast<Eigen::Index>(k) * (d * m + d);
      for (Eigen::Index r = 0; r < d; ++r)
        for (Eigen::Index c = 0; c < m; ++c) grad(base + r * m + c) += xi(r) * x(c);
      grad.segment(base + d * m, d) += xi;
      return;
    }
    case Kind::rbf_feedback: {
      const auto J = static_cast<Eigen::Index>(centers_.size());
      const Eigen::Index base = static_cast<Eigen::Index>(block(k)) * d * J;
      for (Eigen::Index j = 0; j < J; ++j) {
        const double phi = std::exp(-(x - centers_[static_cast<std::size_t>(j)]).squaredNorm() / (2.0 * width_ * width_));
        grad.segment(base + j * d, d) += xi * phi;
      }
      return;
    }
  }
}

void ControlFamily::state_jacobian(const Vector& params, std::size_t k, const Eigen::Ref<const Vector>& x,
                                   Eigen::Ref<Matrix> out) const {
  const auto d = static_cast<Eigen::Index>(d_);
  const auto m = static_cast<Eigen::Index>(m_);
  switch (kind_) {
    case Kind::constant:
    case Kind::piecewise_constant:
      out.setZero();
      return;
    case Kind::linear_feedback: {
      const Eigen::Index base = static_cast<Eigen::Index>(k) * (d * m + d);
      out = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          params.data() + base, d, m);
      return;
    }
    case Kind::rbf_feedback: {
      const auto J = static_cast<Eigen::Index>(centers_.size());
      const Eigen::Index base = static_cast<Eigen::Index>(block(k)) * d * J;
      out.setZero();
      for (Eigen::Index j = 0; j < J; ++j) {
        const Vector diff = x - centers_[static_cast<std::size_t>(j)];
        const double phi = std::exp(-diff.squaredNorm() / (2.0 * width_ * width_));
        out.noalias() -= params.segment(base + j * d, d) * (phi / (width_ * width_)) * diff.transpose();
      }
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// Objective

namespace {

// Scratch for one controlled path and its adjoint.
struct ControlledWork {
  const CoefficientField& coeffs;
  const ControlFamily& family;
  const TimeGrid& grid;
  RowMatrix inc, noise, raw, rates;
  std::vector<unsigned char> clipped;
  Path x, beta_u;
  Matrix sigma, sigma_partial, drift_jac, dvdx;
  Vector state, drift, v, rate, move;
  // adjoint
  RowMatrix gx, gb;
  Vector lambda, lambda_next, s_beta, xi, xi_v, tmp_m;

  ControlledWork(const CoefficientField& c, const ControlFamily& fam, const TimeGrid& g)
      : coeffs(c), family(fam), grid(g), x(g, c.m()), beta_u(g, c.d()) {
    const auto n = static_cast<Eigen::Index>(g.n_steps());
    const auto m = static_cast<Eigen::Index>(c.m());
    const auto d = static_cast<Eigen::Index>(c.d());
    inc.resize(n, d);
    noise.resize(n, d);
    raw.resize(n, d);
    rates.resize(n, d);
    clipped.assign(g.n_steps(), 0);
    sigma.resize(m, d);
    sigma_partial.resize(m, d);
    drift_jac.resize(m, m);
    dvdx.resize(d, m);
    state.resize(m);
    drift.resize(m);
    v.resize(d);
    rate.resize(d);
    move.resize(m);
    lambda.resize(m);
    lambda_next.resize(m);
    s_beta.resize(d);
    xi.resize(d);
    xi_v.resize(d);
    tmp_m.resize(m);
  }

  // Simulates X^u and beta + u on the increments in `inc`; returns the cost
  // f + 1/2 |u|^2 and stores 1/2 |u|^2 in `kinetic`.
  double forward(const PathFunctional& f, const Vector& params, double& kinetic, std::size_t& n_clipped) {
    const double dt = grid.dt();
    const auto n = static_cast<Eigen::Index>(grid.n_steps());
    x.values().row(0) = coeffs.initial_point().transpose();
    beta_u.values().row(0).setZero();
    double energy = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      state = x.values().row(k).transpose();
      family.raw(params, static_cast<std::size_t>(k), state, v);
      raw.row(k) = v.transpose();
      const double norm = v.norm();
      const bool clip = norm > family.clip_bound();
      clipped[static_cast<std::size_t>(k)] = clip;
      rate = clip ? Vector(v * (family.clip_bound() / norm)) : v;
      if (clip) ++n_clipped;
      rates.row(k) = rate.transpose();
      energy += rate.squaredNorm();
      noise.row(k) = inc.row(k) + rate.transpose() * dt;
      coeffs.sigma(state, sigma);
      coeffs.drift(state, drift);
      move.noalias() = sigma * noise.row(k).transpose();
      x.values().row(k + 1) = x.values().row(k) + (move + drift * dt).transpose();
      beta_u.values().row(k + 1) = beta_u.values().row(k) + noise.row(k);
    }
    kinetic = 0.5 * energy * dt;
    return f(x, beta_u) + kinetic;
  }

  // Adds d cost / d params for the last forward pass to grad.
  void backward(const PathFunctional& f, const Vector& params, Eigen::Ref<Vector> grad) {
    const double dt = grid.dt();
    const auto n = static_cast<Eigen::Index>(grid.n_steps());
    const auto m = static_cast<Eigen::Index>(coeffs.m());
    f.gradient(x, beta_u, gx, gb);
    lambda = gx.row(n).transpose();
    s_beta.setZero();
    for (Eigen::Index k = n - 1; k >= 0; --k) {
      s_beta += gb.row(k + 1).transpose();
      state = x.values().row(k).transpose();
      coeffs.sigma(state, sigma);
      // d cost / d u'_k with X_k held fixed
      xi = rates.row(k).transpose() * dt;
      xi.noalias() += dt * (sigma.transpose() * lambda);
      xi += dt * s_beta;
      // through the clip
      if (clipped[static_cast<std::size_t>(k)]) {
        v = raw.row(k).transpose();
        const double norm = v.norm();
        const Vector unit = v / norm;
        xi_v = (family.clip_bound() / norm) * (xi - unit * unit.dot(xi));
      } else {
        xi_v = xi;
      }
      family.accumulate_param_gradient(params, static_cast<std::size_t>(k), state, xi_v, grad);
      // lambda_k = gx_k + lambda_{k+1} dX_{k+1}/dX_k (+ feedback term)
      lambda_next = gx.row(k).transpose() + lambda;
      for (Eigen::Index j = 0; j < m; ++j) {
        coeffs.sigma_partial(state, static_cast<std::size_t>(j), sigma_partial);
        lambda_next(j) += lambda.dot(sigma_partial * noise.row(k).transpose());
      }
      coeffs.drift_jacobian(state, drift_jac);
      lambda_next.noalias() += dt * (drift_jac.transpose() * lambda);
      if (family.is_feedback()) {
        family.state_jacobian(params, static_cast<std::size_t>(k), state, dvdx);
        lambda_next.noalias() += dvdx.transpose() * xi_v;
      }
      lambda.swap(lambda_next);
    }
  }
};

void check_family(const ControlFamily& family, const CoefficientField& coeffs, const TimeGrid& grid) {
  if (family.d() != coeffs.d()) throw InvalidInput("control dimension must equal the driving dimension");
  if (family.is_feedback() && family.m() != coeffs.m()) throw InvalidInput("feedback family state dimension mismatch");
  if (!(family.grid() == grid))
    throw InvalidInput("control family was built for a different grid");
}

}  // namespace

ObjectiveEstimate objective(const PathFunctional& f, const CoefficientField& coeffs, const ControlFamily& family,
                            const Vector& params, std::size_t n_paths, const RandomStream& stream, bool with_gradient) {
  const TimeGrid& grid = family.grid();
  check_family(family, coeffs, grid);
  if (static_cast<std::size_t>(params.size()) != family.n_params())
    throw InvalidInput(fmt::format("expected {} parameters, got {}", family.n_params(), params.size()));
  if (n_paths == 0) throw InvalidInput("n_paths must be positive");
  if (with_gradient && (!f.differentiable() || !coeffs.differentiable()))
    throw InvalidInput("pathwise gradients need a differentiable functional and coefficients");

  std::vector<double> cost(n_paths), kinetic(n_paths);
  const std::size_t chunks = (n_paths + kDefaultChunk - 1) / kDefaultChunk;
  std::vector<Vector> chunk_grad(chunks);
  std::vector<std::size_t> chunk_clipped(chunks, 0);
  parallel_chunks(n_paths, kDefaultChunk, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    ControlledWork work(coeffs, family, grid);
    Vector grad = Vector::Zero(with_gradient ? params.size() : 0);
    std::size_t clipped = 0;
    for (std::size_t i = begin; i < end; ++i) {
      fill_brownian_increments(stream.offset(i), grid, work.inc);
      cost[i] = work.forward(f, params, kinetic[i], clipped);
      if (with_gradient) work.backward(f, params, grad);
    }
    chunk_grad[chunk] = std::move(grad);
    chunk_clipped[chunk] = clipped;
  });
  for (std::size_t i = 0; i < n_paths; ++i)
    if (!std::isfinite(cost[i])) throw NumericalFailure(fmt::format("control objective is not finite on path {}", i));
  ObjectiveEstimate out;
  out.estimate = estimate_mean(cost);
  out.kinetic = estimate_mean(kinetic);
  for (std::size_t c = 0; c < chunks; ++c) out.clipped_steps += chunk_clipped[c];
  if (with_gradient) {
    out.gradient = Vector::Zero(params.size());
    for (const auto& g : chunk_grad) out.gradient += g;
    out.gradient /= static_cast<double>(n_paths);
  }
  return out;
}

const char* to_string(GradientMode mode) {
  switch (mode) {
    case GradientMode::spsa:
      return "spsa";
    case GradientMode::finite_diff:
      return "finite_diff";
    case GradientMode::pathwise:
      return "pathwise";
  }
  return "unknown";
}

namespace {

constexpr std::uint64_t kFinalTag = 0xF1A1'0000'0000ULL;
constexpr std::uint64_t kDirectTag = 0xD1EC'0000'0000ULL;
constexpr std::uint64_t kPerturbTag = 0x5A5A'0000'0000ULL;

}  // namespace

VariationalReport optimize(const PathFunctional& f, const CoefficientField& coeffs, const ControlFamily& family,
                           const OptimizerOptions& options, const RandomStream& stream, const Vector* initial_params) {
  check_family(family, coeffs, family.grid());
  if (options.max_iter == 0) throw InvalidInput("max_iter must be positive");
  if (options.paths_per_iter == 0 || options.final_paths == 0) throw InvalidInput("path counts must be positive");
  if (!(options.step > 0.0)) throw InvalidInput("step must be positive");
  if (!(options.perturbation > 0.0)) throw InvalidInput("perturbation must be positive");
  if (options.grad_mode == GradientMode::pathwise && (!f.differentiable() || !coeffs.differentiable()))
    throw InvalidInput("pathwise mode needs a differentiable functional and coefficients");

  const auto p = static_cast<Eigen::Index>(family.n_params());
  Vector theta = initial_params ? *initial_params : family.zero_params();
  if (theta.size() != p) throw InvalidInput("initial parameters have the wrong size");
  // Work in coordinates psi = theta * sqrt(metric), where the Euclidean norm
  // is the L2(dt) norm of the control.
  const Vector root_metric = family.metric().cwiseSqrt();

  VariationalReport report;
  report.invertibility = family.invertibility();
  report.status = "max_iter";
  double best = std::numeric_limits<double>::infinity();
  double previous = std::numeric_limits<double>::infinity();
  std::size_t increases = 0;
  const double A = 0.1 * static_cast<double>(options.max_iter);

  for (std::size_t it = 0; it < options.max_iter; ++it) {
    const RandomStream batch = stream.derive(it + 1);
    const double gain = options.step * std::pow((1.0 + A) / (static_cast<double>(it) + 1.0 + A), 0.602);
    const double width = options.perturbation / std::pow(static_cast<double>(it) + 1.0, 0.101);

    const bool pathwise = options.grad_mode == GradientMode::pathwise;
    ObjectiveEstimate here = objective(f, coeffs, family, theta, options.paths_per_iter, batch, pathwise);
    report.clipped_steps += here.clipped_steps;

    Vector grad_psi(p);
    switch (options.grad_mode) {
      case GradientMode::pathwise:
        grad_psi = here.gradient.cwiseQuotient(root_metric);
        break;
      case GradientMode::spsa: {
        SplitMix64 rng(stream.derive(kPerturbTag + it).engine());
        Vector delta(p);
        for (Eigen::Index j = 0; j < p; ++j) delta(j) = (rng() >> 63) ? 1.0 : -1.0;
        const Vector step = (width * delta).cwiseQuotient(root_metric);
        const Vector plus = theta + step;
        const Vector minus = theta - step;
        const double jp = objective(f, coeffs, family, plus, options.paths_per_iter, batch).estimate.value;
        const double jm = objective(f, coeffs, family, minus, options.paths_per_iter, batch).estimate.value;
        grad_psi = delta * ((jp - jm) / (2.0 * width));
        break;
      }
      case GradientMode::finite_diff: {
        for (Eigen::Index j = 0; j < p; ++j) {
          Vector plus = theta, minus = theta;
          plus(j) += width / root_metric(j);
          minus(j) -= width / root_metric(j);
          const double jp = objective(f, coeffs, family, plus, options.paths_per_iter, batch).estimate.value;
          const double jm = objective(f, coeffs, family, minus, options.paths_per_iter, batch).estimate.value;
          grad_psi(j) = (jp - jm) / (2.0 * width);
        }
        break;
      }
    }

    if (here.estimate.value < best) {
      best = here.estimate.value;
      report.j_best_raw = here.estimate;
      report.best_params = theta;
    }
    report.trace.push_back({it, here.estimate, 0.0});
    report.param_trace.push_back(theta);
    report.iterations = it + 1;

    increases = here.estimate.value > previous ? increases + 1 : 0;
    previous = here.estimate.value;
    if (increases >= options.divergence_window) {
      report.status = "diverged";
      break;
    }
    if (!grad_psi.allFinite()) throw NumericalFailure(fmt::format("gradient is not finite at iteration {}", it));

    const Vector step_psi = gain * grad_psi;
    report.trace.back().step_norm = step_psi.norm();
    theta -= step_psi.cwiseQuotient(root_metric);
    if (step_psi.norm() < options.tol) {
      report.status = "converged";
      break;
    }
  }

  const ObjectiveEstimate final_estimate =
      objective(f, coeffs, family, report.best_params, options.final_paths, stream.derive(kFinalTag));
  report.j_star = final_estimate.estimate;
  report.direct = estimate_free_energy(f, coeffs, family.grid(), options.final_paths, stream.derive(kDirectTag));
  report.gap = report.j_star.value - report.direct.estimate.value;
  const double se = combined_std_error(report.j_star, report.direct.estimate);
  report.violation = report.gap < -3.0 * se;
  auto standardized = [&](const EstimateWithError& j) {
    const double s = combined_std_error(j, report.direct.estimate);
    const double diff = j.value - report.direct.estimate.value;
    return s > 0.0 ? diff / s : (diff >= 0.0 ? 0.0 : -std::numeric_limits<double>::infinity());
  };
  report.min_standardized_gap = standardized(report.j_star);
  for (const auto& rec : report.trace)
    report.min_standardized_gap = std::min(report.min_standardized_gap, standardized(rec.objective));
  return report;
}

// ---------------------------------------------------------------------------
// Attainment

TreeAttainment attainment_check(std::span<const double> f, const NodeFunction& kernels, const TreePathMeasure& tree) {
  TreeAttainment out;
  const std::vector<double> q = kernel_path_measure(kernels, tree);
  const std::vector<double> theta0 = gibbs_measure(f, tree);
  std::vector<double> diff(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) diff[i] = std::abs(q[i] - theta0[i]);
  out.total_variation = 0.5 * pairwise_sum(diff);
  out.objective = expectation(q, f) + exact_relative_entropy(q, tree);
  out.free_energy = exact_free_energy(f, tree);
  out.excess = out.objective - out.free_energy;
  return out;
}

NodeFunction family_drift_on_tree(const ControlFamily& family, const Vector& params, const TreePathMeasure& tree,
                                  const CoefficientField* coeffs) {
  if (family.d() != tree.dim()) throw InvalidInput("control dimension must equal the tree dimension");
  if (!(family.grid() == tree.grid())) throw InvalidInput("control family was built for a different grid");
  if (coeffs && coeffs->d() != tree.dim()) throw InvalidInput("coefficients do not match the tree");
  const std::size_t m = coeffs ? coeffs->m() : tree.dim();
  if (family.is_feedback() && family.m() != m) throw InvalidInput("feedback family state dimension mismatch");
  const std::size_t n = tree.n_steps();
  const std::size_t d = tree.dim();
  const double dt = tree.grid().dt();
  NodeFunction state(tree, n, m);
  if (coeffs)
    for (std::size_t i = 0; i < m; ++i) state.at(0, 0, i) = coeffs->initial_point()(static_cast<Eigen::Index>(i));
  NodeFunction drift(tree, n - 1, d);
  Vector x(static_cast<Eigen::Index>(m)), rate(static_cast<Eigen::Index>(d)), dw(static_cast<Eigen::Index>(d));
  Matrix sigma(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
  Vector b(static_cast<Eigen::Index>(m));
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j) {
      for (std::size_t i = 0; i < m; ++i) x(static_cast<Eigen::Index>(i)) = state.at(k, j, i);
      family.evaluate(params, k, x, rate);
      for (std::size_t i = 0; i < d; ++i) drift.at(k, j, i) = rate(static_cast<Eigen::Index>(i));
      if (coeffs) {
        coeffs->sigma(x, sigma);
        coeffs->drift(x, b);
      }
      for (std::size_t c = 0; c < tree.branching(); ++c) {
        for (std::size_t i = 0; i < d; ++i) dw(static_cast<Eigen::Index>(i)) = tree.increment(c, i);
        const Vector next = coeffs ? Vector(x + sigma * dw + b * dt) : Vector(x + dw);
        for (std::size_t i = 0; i < m; ++i) state.at(k + 1, j * tree.branching() + c, i) = next(static_cast<Eigen::Index>(i));
      }
    }
  }
  return drift;
}

AttainmentStatistic attainment_check(const PathFunctional& f, const CoefficientField& coeffs,
                                     const ControlFamily& family, const Vector& params, std::size_t n_paths,
                                     const RandomStream& stream) {
  const TimeGrid& grid = family.grid();
  check_family(family, coeffs, grid);
  if (n_paths < 2) throw InvalidInput("attainment check needs at least two paths");
  using TestFn = double (*)(double);
  static constexpr TestFn tests[10] = {
      [](double x) { return x; },
      [](double x) { return x * x; },
      [](double x) { return x * x * x; },
      [](double x) { return std::sin(x); },
      [](double x) { return std::cos(x); },
      [](double x) { return std::tanh(x); },
      [](double x) { return std::exp(-x * x); },
      [](double x) { return std::abs(x); },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; },
      [](double x) { return x * std::cos(x); },
  };
  constexpr std::size_t T = 10;

  // Controlled side.
  const PathFunctional zero = functionals::constant(0.0);
  std::vector<double> terminal_u(n_paths);
  parallel_chunks(n_paths, kDefaultChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    ControlledWork work(coeffs, family, grid);
    std::size_t clipped = 0;
    double kinetic = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      fill_brownian_increments(stream.derive(1).offset(i), grid, work.inc);
      work.forward(zero, params, kinetic, clipped);
      terminal_u[i] = work.x.at(grid.n_steps(), 0);
    }
  });
  // Gibbs side, self-normalized.
  std::vector<double> terminal(n_paths), fvals(n_paths);
  parallel_chunks(n_paths, kDefaultChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    DriverWork work(coeffs, grid);
    for (std::size_t i = begin; i < end; ++i) {
      work.draw(stream.derive(2).offset(i), grid);
      fvals[i] = f(work.x, work.beta);
      terminal[i] = work.x.at(grid.n_steps(), 0);
    }
  });
  const double fmin = *std::min_element(fvals.begin(), fvals.end());
  std::vector<double> w(n_paths);
  for (std::size_t i = 0; i < n_paths; ++i) w[i] = std::exp(-(fvals[i] - fmin));
  const double wbar = pairwise_sum(w) / static_cast<double>(n_paths);

  AttainmentStatistic out;
  out.mode = "monte_carlo";
  std::vector<double> a(n_paths), b(n_paths);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < n_paths; ++i) {
      a[i] = tests[t](terminal_u[i]);
      b[i] = tests[t](terminal[i]) * w[i];
    }
    const EstimateWithError ea = estimate_mean(a);
    const double ratio = pairwise_sum(b) / static_cast<double>(n_paths) / wbar;
    for (std::size_t i = 0; i < n_paths; ++i) b[i] = (tests[t](terminal[i]) - ratio) * w[i] / wbar;
    const double se_ratio = estimate_mean(b).std_error;
    const double se = std::hypot(ea.std_error, se_ratio);
    const double z = se > 0.0 ? std::abs(ea.value - ratio) / se : (ea.value == ratio ? 0.0 : std::numeric_limits<double>::infinity());
    out.per_test.push_back(z);
    out.statistic = std::max(out.statistic, z);
  }
  return out;
}

}  // namespace diffvar
