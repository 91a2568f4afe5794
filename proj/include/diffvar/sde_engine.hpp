#pragma once

// Diffusions dX = sigma(X) d(beta + u) + b(X) dt on the unit grid, the
// pseudo-inverse pair (theta, eta) and the driver reconstruction
//   d beta_hat = theta(X) dM + eta(X) dB,   M = X - c - int b(X) dt.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>

#include "diffvar/path_core.hpp"

namespace diffvar {

/// The pair (sigma, b) with declared bounds. sigma maps R^m to m x d
/// matrices (m <= d); the bounds use the Frobenius norm for sigma and the
/// Euclidean norm for b.
class CoefficientField {
 public:
  using SigmaFn = std::function<void(const Eigen::Ref<const Vector>& y, Eigen::Ref<Matrix> out)>;
  using DriftFn = std::function<void(const Eigen::Ref<const Vector>& y, Eigen::Ref<Vector> out)>;
  /// Writes d sigma / d y_j (m x d) into out.
  using SigmaPartialFn =
      std::function<void(const Eigen::Ref<const Vector>& y, std::size_t j, Eigen::Ref<Matrix> out)>;
  /// Writes the m x m Jacobian of b into out.
  using DriftJacobianFn =
      std::function<void(const Eigen::Ref<const Vector>& y, Eigen::Ref<Matrix> out)>;

  struct Bounds {
    double sigma_bound = 0.0;
    double b_bound = 0.0;
    double sigma_lipschitz = 0.0;
    double b_lipschitz = 0.0;
  };

  CoefficientField(std::string name, std::size_t m, std::size_t d, SigmaFn sigma, DriftFn drift,
                   Bounds bounds, Vector initial_point);

  const std::string& name() const { return name_; }
  std::size_t m() const { return m_; }
  std::size_t d() const { return d_; }
  const Bounds& bounds() const { return bounds_; }
  const Vector& initial_point() const { return initial_point_; }

  void sigma(const Eigen::Ref<const Vector>& y, Eigen::Ref<Matrix> out) const { sigma_(y, out); }
  void drift(const Eigen::Ref<const Vector>& y, Eigen::Ref<Vector> out) const { drift_(y, out); }
  Matrix sigma(const Vector& y) const;
  Vector drift(const Vector& y) const;

  /// Derivatives are optional; pathwise gradients need both.
  void set_derivatives(SigmaPartialFn sigma_partial, DriftJacobianFn drift_jacobian);
  bool differentiable() const { return static_cast<bool>(sigma_partial_) && static_cast<bool>(drift_jacobian_); }
  void sigma_partial(const Eigen::Ref<const Vector>& y, std::size_t j, Eigen::Ref<Matrix> out) const {
    sigma_partial_(y, j, out);
  }
  void drift_jacobian(const Eigen::Ref<const Vector>& y, Eigen::Ref<Matrix> out) const {
    drift_jacobian_(y, out);
  }

 private:
  std::string name_;
  std::size_t m_;
  std::size_t d_;
  SigmaFn sigma_;
  DriftFn drift_;
  SigmaPartialFn sigma_partial_;
  DriftJacobianFn drift_jacobian_;
  Bounds bounds_;
  Vector initial_point_;
};

/// Spot-checks the declared bounds and Lipschitz constants on random points
/// of [-radius, radius]^m (tolerance 0). Throws InvalidInput on violation.
void validate_coefficients(const CoefficientField& field, std::size_t n_samples = 2000,
                           std::uint64_t seed = 17, double radius = 10.0);

namespace presets {

/// sigma = I_dim, b = 0, c = 0: X is the driving Brownian motion itself.
CoefficientField brownian(std::size_t dim = 1);
/// sigma = scale [I_m 0], b = drift (constant).
CoefficientField constant(std::size_t m, std::size_t d, double scale, double drift);
/// sigma = scale I, b(y) = -kappa clamp(y, -radius, radius) + offset.
CoefficientField affine(std::size_t dim, double scale, double kappa, double radius, double offset);
/// m = d = 1: sigma(y) = scale (1 + 0.5 sin y), b(y) = drift cos y.
CoefficientField sinusoidal(double scale = 1.0, double drift = 0.3);
/// m = 1, d = 2: sigma(y) = [sin y, 0.5 sin y], b(y) = 0.5 + 0.25 cos y, c = 0.
/// Rank 1 away from multiples of pi and rank 0 on them (including the start).
CoefficientField degenerate();

}  // namespace presets

/// theta = Moore-Penrose pseudo-inverse of sigma (inverts sigma on im(sigma),
/// vanishes on its orthogonal complement) and eta = I_d - theta sigma, the
/// orthogonal projector onto ker(sigma).
struct PseudoInversePair {
  Matrix theta;  // d x m
  Matrix eta;    // d x d
  std::size_t rank = 0;
};

inline constexpr double kDefaultRankTolerance = 1e-10;

/// Singular values below rank_tolerance times the largest are treated as zero.
PseudoInversePair theta_eta(const Matrix& sigma, double rank_tolerance = kDefaultRankTolerance);

/// Euler-Maruyama for X^u:
///   X_{k+1} = X_k + sigma(X_k) (d beta_k + u'_k dt) + b(X_k) dt,  X_0 = c.
/// Holds scratch buffers so repeated runs do not allocate.
class EulerMaruyama {
 public:
  explicit EulerMaruyama(const CoefficientField& field);

  /// `shift_density` may be null (u = 0). `out` must be (n_steps + 1) x m.
  void run(const TimeGrid& grid, const RowMatrix& increments, const RowMatrix* shift_density,
           RowMatrix& out);

  /// Closed-loop variant: the shift density on step k is produced from
  /// (k, X^u_k) by `control`, which writes it into its last argument. The
  /// realized densities are stored in `shift_out` (n_steps x d).
  template <class Control>
  void run_feedback(const TimeGrid& grid, const RowMatrix& increments, Control&& control,
                    RowMatrix& out, RowMatrix& shift_out);

  const CoefficientField& field() const { return field_; }

 private:
  const CoefficientField& field_;
  Matrix sigma_;
  Vector drift_;
  Vector state_;
  Vector noise_;
  Vector move_;
};

Path euler_maruyama(const CoefficientField& field, const TimeGrid& grid,
                    const RowMatrix& driver_increments);
Path euler_maruyama(const CoefficientField& field, const TimeGrid& grid,
                    const RowMatrix& driver_increments, const CameronMartinShift& shift);

/// d beta_hat_k = theta(X_k) (dX_k - b(X_k) dt) + eta(X_k) dB_k, beta_hat(0) = 0.
Path reconstruct_beta(const Path& x, const Path& b, const CoefficientField& field,
                      double rank_tolerance = kDefaultRankTolerance);

/// The pair X^u(w) = (X^u, beta + u).
struct PerturbedPair {
  Path x;
  Path beta;
};

/// X^u from euler_maruyama driven by beta's increments, and beta^u = beta + int u'.
PerturbedPair perturbed_system(const CoefficientField& field, const Path& beta,
                               const CameronMartinShift& shift);

/// Read-only prefix of a path: nodes [0, visible) may be read, any later
/// node throws. Shift rules only ever see the history their adaptedness allows.
class HistoryView {
 public:
  HistoryView(const Path& path, std::size_t visible) : path_(&path), visible_(visible) {}

  std::size_t visible() const { return visible_; }
  std::size_t dim() const { return path_->dim(); }
  const TimeGrid& grid() const { return path_->grid(); }
  auto node(std::size_t k) const {
    check(k);
    return path_->node(k);
  }
  double at(std::size_t k, std::size_t i) const {
    check(k);
    return path_->at(k, i);
  }

 private:
  void check(std::size_t k) const;

  const Path* path_;
  std::size_t visible_;
};

/// Number of nodes a rule with the given adaptedness may read on step k.
std::size_t visible_nodes(const Adaptedness& adaptedness, std::size_t k);

/// An adapted H-valued functional u(w) of the canonical pair w = (x, b).
/// Evaluated on step k it writes u'_k into `out`.
class ShiftRule {
 public:
  virtual ~ShiftRule() = default;
  virtual Adaptedness adaptedness() const = 0;
  virtual std::size_t dim() const = 0;
  virtual void density(std::size_t k, const HistoryView& x, const HistoryView& b,
                       Eigen::Ref<Vector> out) const = 0;
};

/// u given by a fixed shift.
class DeterministicRule final : public ShiftRule {
 public:
  explicit DeterministicRule(CameronMartinShift shift);
  Adaptedness adaptedness() const override { return Adaptedness::deterministic(); }
  std::size_t dim() const override { return shift_.dim(); }
  void density(std::size_t k, const HistoryView& x, const HistoryView& b,
               Eigen::Ref<Vector> out) const override;
  const CameronMartinShift& shift() const { return shift_; }

 private:
  CameronMartinShift shift_;
};

/// u'_k = feedback(t_k, x_k).
class MarkovFeedbackRule final : public ShiftRule {
 public:
  using Feedback = std::function<void(double t, const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out)>;
  MarkovFeedbackRule(std::size_t dim, Feedback feedback);
  Adaptedness adaptedness() const override { return Adaptedness::markov_feedback(); }
  std::size_t dim() const override { return dim_; }
  void density(std::size_t k, const HistoryView& x, const HistoryView& b,
               Eigen::Ref<Vector> out) const override;

 private:
  std::size_t dim_;
  Feedback feedback_;
};

/// u'_k = functional(k, history up to node k - delay); zero-history steps
/// (k < delay) still call the functional, with empty views.
class RetardedRule final : public ShiftRule {
 public:
  using Functional =
      std::function<void(std::size_t k, const HistoryView& x, const HistoryView& b, Eigen::Ref<Vector> out)>;
  RetardedRule(std::size_t dim, std::size_t delay, Functional functional);
  Adaptedness adaptedness() const override { return Adaptedness::path_functional(delay_); }
  std::size_t dim() const override { return dim_; }
  void density(std::size_t k, const HistoryView& x, const HistoryView& b,
               Eigen::Ref<Vector> out) const override;

 private:
  std::size_t dim_;
  std::size_t delay_;
  Functional functional_;
};

/// Evaluates the rule along the input pair w = (x, b).
CameronMartinShift realize(const ShiftRule& rule, const Path& x, const Path& b);

/// The path-space map X^u: w = (x, b) -> (X^u(w), beta(w) + u(w)) with
/// beta(w) = reconstruct_beta(x, b).
struct ShiftedImage {
  PerturbedPair image;
  CameronMartinShift shift;  // u(w)
};
ShiftedImage apply_shift_map(const CoefficientField& field, const ShiftRule& rule, const Path& x,
                             const Path& b);

struct CompositionReport {
  double x_discrepancy = 0.0;     // max node-wise |X_lhs - X_rhs|
  double beta_discrepancy = 0.0;  // max node-wise |beta_lhs - beta_rhs|
  double max() const { return std::max(x_discrepancy, beta_discrepancy); }
};

/// Compares X^u o X^v with X^{v + u o X^v} at the input pair w = (x, b).
CompositionReport compose_check(const CoefficientField& field, const ShiftRule& u,
                                const ShiftRule& v, const Path& x, const Path& b);

// ---------------------------------------------------------------------------

template <class Control>
void EulerMaruyama::run_feedback(const TimeGrid& grid, const RowMatrix& increments,
                                 Control&& control, RowMatrix& out, RowMatrix& shift_out) {
  const auto n = static_cast<Eigen::Index>(grid.n_steps());
  out.row(0) = field_.initial_point().transpose();
  Vector rate(static_cast<Eigen::Index>(field_.d()));
  for (Eigen::Index k = 0; k < n; ++k) {
    state_ = out.row(k).transpose();
    control(static_cast<std::size_t>(k), state_, rate);
    shift_out.row(k) = rate.transpose();
    noise_ = increments.row(k).transpose() + rate * grid.dt();
    field_.sigma(state_, sigma_);
    field_.drift(state_, drift_);
    move_.noalias() = sigma_ * noise_;
    out.row(k + 1) = out.row(k) + (move_ + drift_ * grid.dt()).transpose();
  }
}

}  // namespace diffvar
