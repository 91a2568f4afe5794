#include "diffvar/sde_engine.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include <fmt/core.h>

#include "diffvar/errors.hpp"

namespace diffvar {

CoefficientField::CoefficientField(std::string name, std::size_t m, std::size_t d, SigmaFn sigma,
                                   DriftFn drift, Bounds bounds, Vector initial_point)
    : name_(std::move(name)),
      m_(m),
      d_(d),
      sigma_(std::move(sigma)),
      drift_(std::move(drift)),
      bounds_(bounds),
      initial_point_(std::move(initial_point)) {
  if (m_ == 0 || d_ == 0) throw InvalidInput("coefficient dimensions must be positive");
  if (m_ > d_) throw InvalidInput(fmt::format("state dimension {} exceeds driving dimension {}", m_, d_));
  if (static_cast<std::size_t>(initial_point_.size()) != m_)
    throw InvalidInput("initial point has the wrong dimension");
  if (!sigma_ || !drift_) throw InvalidInput("coefficient functions must be set");
}

Matrix CoefficientField::sigma(const Vector& y) const {
  Matrix out(static_cast<Eigen::Index>(m_), static_cast<Eigen::Index>(d_));
  sigma_(y, out);
  return out;
}

Vector CoefficientField::drift(const Vector& y) const {
  Vector out(static_cast<Eigen::Index>(m_));
  drift_(y, out);
  return out;
}

void CoefficientField::set_derivatives(SigmaPartialFn sigma_partial, DriftJacobianFn drift_jacobian) {
  sigma_partial_ = std::move(sigma_partial);
  drift_jacobian_ = std::move(drift_jacobian);
}

void validate_coefficients(const CoefficientField& field, std::size_t n_samples, std::uint64_t seed,
                           double radius) {
  const auto m = static_cast<Eigen::Index>(field.m());
  const auto& bounds = field.bounds();
  SplitMix64 engine(seed);
  std::uniform_real_distribution<double> uniform(-radius, radius);
  auto draw = [&] {
    Vector y(m);
    for (Eigen::Index i = 0; i < m; ++i) y(i) = uniform(engine);
    return y;
  };

  Vector prev_y = field.initial_point();
  Matrix prev_s = field.sigma(prev_y);
  Vector prev_b = field.drift(prev_y);
  for (std::size_t s = 0; s <= n_samples; ++s) {
    Vector y = s == 0 ? field.initial_point() : draw();
    Matrix sig = field.sigma(y);
    Vector b = field.drift(y);
    if (!sig.allFinite() || !b.allFinite())
      throw InvalidInput(fmt::format("coefficients '{}' are not finite at a sampled point", field.name()));
    if (sig.norm() > bounds.sigma_bound)
      throw InvalidInput(fmt::format("sigma of '{}' exceeds its declared bound {} (|sigma| = {})",
                                     field.name(), bounds.sigma_bound, sig.norm()));
    if (b.norm() > bounds.b_bound)
      throw InvalidInput(fmt::format("drift of '{}' exceeds its declared bound {} (|b| = {})",
                                     field.name(), bounds.b_bound, b.norm()));
    const double dy = (y - prev_y).norm();
    if (dy > 0.0) {
      if ((sig - prev_s).norm() > bounds.sigma_lipschitz * dy)
        throw InvalidInput(fmt::format("sigma of '{}' violates its Lipschitz constant {}", field.name(),
                                       bounds.sigma_lipschitz));
      if ((b - prev_b).norm() > bounds.b_lipschitz * dy)
        throw InvalidInput(fmt::format("drift of '{}' violates its Lipschitz constant {}", field.name(),
                                       bounds.b_lipschitz));
    }
    prev_y = std::move(y);
    prev_s = std::move(sig);
    prev_b = std::move(b);
  }
}

namespace presets {

namespace {
// Declared constants carry a hair of slack so that rounding in the norm
// computation never trips the zero-tolerance validation.
constexpr double kSlack = 1.0 + 1e-12;
}  // namespace

CoefficientField brownian(std::size_t dim) {
  if (dim == 0) throw InvalidInput("brownian preset needs dim >= 1");
  const auto n = static_cast<Eigen::Index>(dim);
  CoefficientField field(
      "brownian", dim, dim,
      [](const Eigen::Ref<const Vector>&, Eigen::Ref<Matrix> out) { out.setIdentity(); },
      [](const Eigen::Ref<const Vector>&, Eigen::Ref<Vector> out) { out.setZero(); },
      {std::sqrt(static_cast<double>(dim)) * kSlack, 0.0, 0.0, 0.0}, Vector::Zero(n));
  field.set_derivatives(
      [](const Eigen::Ref<const Vector>&, std::size_t, Eigen::Ref<Matrix> out) { out.setZero(); },
      [](const Eigen::Ref<const Vector>&, Eigen::Ref<Matrix> out) { out.setZero(); });
  return field;
}

CoefficientField constant(std::size_t m, std::size_t d, double scale, double drift) {
  if (m == 0 || d < m) throw InvalidInput("constant preset needs 1 <= m <= d");
  const double root_m = std::sqrt(static_cast<double>(m));
  CoefficientField field(
      "constant", m, d,
      [scale](const Eigen::Ref<const Vector>&, Eigen::Ref<Matrix> out) {
        out.setIdentity();
        out *= scale;
      },
      [drift](const Eigen::Ref<const Vector>&, Eigen::Ref<Vector> out) { out.setConstant(drift); },
      {std::abs(scale) * root_m * kSlack, std::abs(drift) * root_m * kSlack, 0.0, 0.0},
      Vector::Zero(static_cast<Eigen::Index>(m)));
  field.set_derivatives(
      [](const Eigen::Ref<const Vector>&, std::size_t, Eigen::Ref<Matrix> out) { out.setZero(); },
      [](const Eigen::Ref<const Vector>&, Eigen::Ref<Matrix> out) { out.setZero(); });
  return field;
}

CoefficientField affine(std::size_t dim, double scale, double kappa, double radius, double offset) {
  if (dim == 0) throw InvalidInput("affine preset needs dim >= 1");
  if (!(radius > 0.0)) throw InvalidInput("affine preset needs a positive clamp radius");
  const double root = std::sqrt(static_cast<double>(dim));
  CoefficientField field(
      "affine", dim, dim,
      [scale](const Eigen::Ref<const Vector>&, Eigen::Ref<Matrix> out) {
        out.setIdentity();
        out *= scale;
      },
      [kappa, radius, offset](const Eigen::Ref<const Vector>& y, Eigen::Ref<Vector> out) {
        for (Eigen::Index i = 0; i < y.size(); ++i)
          out(i) = -kappa * std::clamp(y(i), -radius, radius) + offset;
      },
      {std::abs(scale) * root * kSlack, (std::abs(kappa) * radius + std::abs(offset)) * root * kSlack,
       0.0, std::abs(kappa) * kSlack},
      Vector::Zero(static_cast<Eigen::Index>(dim)));
  field.set_derivatives(
      [](const Eigen::Ref<const Vector>&, std::size_t, Eigen::Ref<Matrix> out) { out.setZero(); },
      [kappa, radius](const Eigen::Ref<const Vector>& y, Eigen::Ref<Matrix> out) {
        out.setZero();
        for (Eigen::Index i = 0; i < y.size(); ++i)
          if (std::abs(y(i)) < radius) out(i, i) = -kappa;
      });
  return field;
}

CoefficientField sinusoidal(double scale, double drift) {
  CoefficientField field(
      "sinusoidal", 1, 1,
      [scale](const Eigen::Ref<const Vector>& y, Eigen::Ref<Matrix> out) {
        out(0, 0) = scale * (1.0 + 0.5 * std::sin(y(0)));
      },
      [drift](const Eigen::Ref<const Vector>& y, Eigen::Ref<Vector> out) { out(0) = drift * std::cos(y(0)); },
      {1.5 * std::abs(scale) * kSlack, std::abs(drift) * kSlack, 0.5 * std::abs(scale) * kSlack,
       std::abs(drift) * kSlack},
      Vector::Zero(1));
  field.set_derivatives(
      [scale](const Eigen::Ref<const Vector>& y, std::size_t, Eigen::Ref<Matrix> out) {
        out(0, 0) = 0.5 * scale * std::cos(y(0));
      },
      [drift](const Eigen::Ref<const Vector>& y, Eigen::Ref<Matrix> out) {
        out(0, 0) = -drift * std::sin(y(0));
      });
  return field;
}

CoefficientField degenerate() {
  const double row_norm = std::sqrt(1.25);
  CoefficientField field(
      "degenerate", 1, 2,
      [](const Eigen::Ref<const Vector>& y, Eigen::Ref<Matrix> out) {
        const double s = std::sin(y(0));
        out(0, 0) = s;
        out(0, 1) = 0.5 * s;
      },
      [](const Eigen::Ref<const Vector>& y, Eigen::Ref<Vector> out) { out(0) = 0.5 + 0.25 * std::cos(y(0)); },
      {row_norm * kSlack, 0.75 * kSlack, row_norm * kSlack, 0.25 * kSlack}, Vector::Zero(1));
  field.set_derivatives(
      [](const Eigen::Ref<const Vector>& y, std::size_t, Eigen::Ref<Matrix> out) {
        const double c = std::cos(y(0));
        out(0, 0) = c;
        out(0, 1) = 0.5 * c;
      },
      [](const Eigen::Ref<const Vector>& y, Eigen::Ref<Matrix> out) { out(0, 0) = -0.25 * std::sin(y(0)); });
  return field;
}

}  // namespace presets

namespace {

// theta and eta for a single row sigma (m = 1): theta = sigma^T / |sigma|^2.
void theta_eta_row(const Eigen::Ref<const Matrix>& sigma, Matrix& theta, Matrix& eta, std::size_t& rank) {
  const auto d = sigma.cols();
  const double norm_sq = sigma.squaredNorm();
  theta.resize(d, 1);
  if (norm_sq > 0.0 && std::isfinite(norm_sq)) {
    theta = sigma.transpose() / norm_sq;
    rank = 1;
  } else {
    theta.setZero();
    rank = 0;
  }
  eta.noalias() = -theta * sigma;
  eta.diagonal().array() += 1.0;
}

void theta_eta_into(const Eigen::Ref<const Matrix>& sigma, double rank_tolerance, Matrix& theta,
                    Matrix& eta, std::size_t& rank) {
  if (!sigma.allFinite()) throw InvalidInput("sigma has non-finite entries");
  if (sigma.rows() == 1) {
    theta_eta_row(sigma, theta, eta, rank);
    return;
  }
  Eigen::JacobiSVD<Matrix> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  const double cutoff = s.size() > 0 ? rank_tolerance * s(0) : 0.0;
  Vector inv = Vector::Zero(s.size());
  rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > cutoff && s(i) > 0.0) {
      inv(i) = 1.0 / s(i);
      ++rank;
    }
  }
  const auto k = s.size();
  theta.noalias() = svd.matrixV().leftCols(k) * inv.asDiagonal() * svd.matrixU().leftCols(k).transpose();
  eta.noalias() = -theta * sigma;
  eta.diagonal().array() += 1.0;
}

}  // namespace

PseudoInversePair theta_eta(const Matrix& sigma, double rank_tolerance) {
  if (sigma.rows() == 0 || sigma.cols() == 0) throw InvalidInput("sigma must be non-empty");
  if (sigma.rows() > sigma.cols()) throw InvalidInput("sigma must have m <= d");
  PseudoInversePair out;
  theta_eta_into(sigma, rank_tolerance, out.theta, out.eta, out.rank);
  return out;
}

EulerMaruyama::EulerMaruyama(const CoefficientField& field)
    : field_(field),
      sigma_(static_cast<Eigen::Index>(field.m()), static_cast<Eigen::Index>(field.d())),
      drift_(static_cast<Eigen::Index>(field.m())),
      state_(static_cast<Eigen::Index>(field.m())),
      noise_(static_cast<Eigen::Index>(field.d())),
      move_(static_cast<Eigen::Index>(field.m())) {}

void EulerMaruyama::run(const TimeGrid& grid, const RowMatrix& increments, const RowMatrix* shift_density,
                        RowMatrix& out) {
  const auto n = static_cast<Eigen::Index>(grid.n_steps());
  const auto m = static_cast<Eigen::Index>(field_.m());
  const auto d = static_cast<Eigen::Index>(field_.d());
  if (increments.rows() != n || increments.cols() != d)
    throw InvalidInput(fmt::format("driver increments must be {} x {}", n, d));
  if (shift_density && (shift_density->rows() != n || shift_density->cols() != d))
    throw InvalidInput(fmt::format("shift density must be {} x {}", n, d));
  if (out.rows() != n + 1 || out.cols() != m) out.resize(n + 1, m);
  const double dt = grid.dt();
  out.row(0) = field_.initial_point().transpose();
  for (Eigen::Index k = 0; k < n; ++k) {
    state_ = out.row(k).transpose();
    noise_ = increments.row(k).transpose();
    if (shift_density) noise_ += shift_density->row(k).transpose() * dt;
    field_.sigma(state_, sigma_);
    field_.drift(state_, drift_);
    move_.noalias() = sigma_ * noise_;
    out.row(k + 1) = out.row(k) + (move_ + drift_ * dt).transpose();
  }
}

Path euler_maruyama(const CoefficientField& field, const TimeGrid& grid, const RowMatrix& driver_increments) {
  EulerMaruyama em(field);
  RowMatrix out;
  em.run(grid, driver_increments, nullptr, out);
  return {grid, std::move(out)};
}

Path euler_maruyama(const CoefficientField& field, const TimeGrid& grid, const RowMatrix& driver_increments,
                    const CameronMartinShift& shift) {
  if (!(shift.grid() == grid)) throw InvalidInput("shift lives on a different grid");
  EulerMaruyama em(field);
  RowMatrix out;
  em.run(grid, driver_increments, &shift.density(), out);
  return {grid, std::move(out)};
}

Path reconstruct_beta(const Path& x, const Path& b, const CoefficientField& field, double rank_tolerance) {
  if (!(x.grid() == b.grid())) throw InvalidInput("X and B live on different grids");
  if (x.dim() != field.m()) throw InvalidInput("X has the wrong dimension for these coefficients");
  if (b.dim() != field.d()) throw InvalidInput("B has the wrong dimension for these coefficients");
  const auto m = static_cast<Eigen::Index>(field.m());
  const auto d = static_cast<Eigen::Index>(field.d());
  const double dt = x.grid().dt();
  Matrix sigma(m, d), theta(d, m), eta(d, d);
  Vector state(m), drift(m), dm(m), db(d), step(d);
  std::size_t rank = 0;
  Path beta(x.grid(), field.d());
  for (std::size_t k = 0; k < x.grid().n_steps(); ++k) {
    state = x.node(k).transpose();
    field.sigma(state, sigma);
    field.drift(state, drift);
    theta_eta_into(sigma, rank_tolerance, theta, eta, rank);
    dm = (x.node(k + 1) - x.node(k)).transpose() - drift * dt;
    db = (b.node(k + 1) - b.node(k)).transpose();
    step.noalias() = theta * dm;
    step.noalias() += eta * db;
    beta.node(k + 1) = beta.node(k) + step.transpose();
  }
  return beta;
}

PerturbedPair perturbed_system(const CoefficientField& field, const Path& beta, const CameronMartinShift& shift) {
  if (beta.dim() != field.d()) throw InvalidInput("driver has the wrong dimension");
  if (shift.dim() != field.d()) throw InvalidInput("shift has the wrong dimension");
  Path x = euler_maruyama(field, beta.grid(), beta.increments(), shift);
  Path shifted = integrate_density(shift);
  shifted.values() += beta.values();
  return {std::move(x), std::move(shifted)};
}

void HistoryView::check(std::size_t k) const {
  if (k >= visible_)
    throw InvalidInput(fmt::format("shift rule read node {} but only nodes before {} are visible", k, visible_));
}

std::size_t visible_nodes(const Adaptedness& adaptedness, std::size_t k) {
  switch (adaptedness.kind) {
    case Adaptedness::Kind::deterministic:
      return 0;
    case Adaptedness::Kind::markov_feedback:
      return k + 1;
    case Adaptedness::Kind::path_functional:
      return k + 1 >= adaptedness.delay ? k + 1 - adaptedness.delay : 0;
  }
  return 0;
}

DeterministicRule::DeterministicRule(CameronMartinShift shift) : shift_(std::move(shift)) {}

void DeterministicRule::density(std::size_t k, const HistoryView&, const HistoryView&,
                                Eigen::Ref<Vector> out) const {
  out = shift_.rate(k).transpose();
}

MarkovFeedbackRule::MarkovFeedbackRule(std::size_t dim, Feedback feedback)
    : dim_(dim), feedback_(std::move(feedback)) {
  if (dim_ == 0) throw InvalidInput("feedback dimension must be positive");
}

void MarkovFeedbackRule::density(std::size_t k, const HistoryView& x, const HistoryView&,
                                 Eigen::Ref<Vector> out) const {
  const Vector state = x.node(k).transpose();
  feedback_(x.grid().node(k), state, out);
}

RetardedRule::RetardedRule(std::size_t dim, std::size_t delay, Functional functional)
    : dim_(dim), delay_(delay), functional_(std::move(functional)) {
  if (dim_ == 0) throw InvalidInput("retarded rule dimension must be positive");
}

void RetardedRule::density(std::size_t k, const HistoryView& x, const HistoryView& b,
                           Eigen::Ref<Vector> out) const {
  functional_(k, x, b, out);
}

CameronMartinShift realize(const ShiftRule& rule, const Path& x, const Path& b) {
  if (!(x.grid() == b.grid())) throw InvalidInput("X and B live on different grids");
  const TimeGrid& grid = x.grid();
  const Adaptedness adaptedness = rule.adaptedness();
  RowMatrix density(static_cast<Eigen::Index>(grid.n_steps()), static_cast<Eigen::Index>(rule.dim()));
  Vector rate(static_cast<Eigen::Index>(rule.dim()));
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    const std::size_t visible = visible_nodes(adaptedness, k);
    rate.setZero();
    rule.density(k, HistoryView(x, visible), HistoryView(b, visible), rate);
    density.row(static_cast<Eigen::Index>(k)) = rate.transpose();
  }
  return {grid, std::move(density), adaptedness};
}

ShiftedImage apply_shift_map(const CoefficientField& field, const ShiftRule& rule, const Path& x,
                             const Path& b) {
  if (rule.dim() != field.d()) throw InvalidInput("shift rule has the wrong dimension");
  Path beta = reconstruct_beta(x, b, field);
  CameronMartinShift shift = realize(rule, x, b);
  PerturbedPair image = perturbed_system(field, beta, shift);
  return {std::move(image), std::move(shift)};
}

CompositionReport compose_check(const CoefficientField& field, const ShiftRule& u, const ShiftRule& v,
                                const Path& x, const Path& b) {
  for (const ShiftRule* rule : {&u, &v})
    if (rule->adaptedness().kind == Adaptedness::Kind::path_functional)
      throw InvalidInput("compose_check takes deterministic or Markov feedback shifts");

  // Left side: X^u applied to the output of X^v.
  const ShiftedImage inner = apply_shift_map(field, v, x, b);
  const ShiftedImage lhs = apply_shift_map(field, u, inner.image.x, inner.image.beta);

  // Right side: X^{v + u o X^v} at the original input.
  const CameronMartinShift combined = inner.shift + lhs.shift;
  const Path beta = reconstruct_beta(x, b, field);
  const PerturbedPair rhs = perturbed_system(field, beta, combined);

  CompositionReport report;
  report.x_discrepancy = (lhs.image.x.values() - rhs.x.values()).cwiseAbs().maxCoeff();
  report.beta_discrepancy = (lhs.image.beta.values() - rhs.beta.values()).cwiseAbs().maxCoeff();
  return report;
}

}  // namespace diffvar
