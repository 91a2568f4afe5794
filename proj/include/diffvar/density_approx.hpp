#pragma once

// Approximating a target density L by the law of an invertible shifted
// system: truncate and normalize, mix with the constant density, take the
// Doob martingale, represent it as dM = alpha M dbeta, cap the energy of
// alpha with a stopping rule, and delay the result by eta steps. The delayed
// control gamma can be undone block by block, so the shift is invertible.

#include <array>
#include <functional>
#include <span>
#include <vector>

#include "diffvar/discrete_oracle.hpp"
#include "diffvar/sde_engine.hpp"

namespace diffvar {

struct ApproximationParams {
  double n0 = 1.0;        // truncation level
  double a = 0.0;         // mixing weight in [0, 1]
  double n = 1.0;         // energy cap
  std::size_t eta = 1;    // delay in grid steps

  /// Throws InvalidInput unless n0 >= 1, 0 <= a <= 1, n >= 1 and 1 <= eta <= n_steps.
  void validate(std::size_t n_steps) const;
};

/// min(L, n0) / E[min(L, n0)] on the tree.
std::vector<double> truncate_normalize(std::span<const double> L, double n0, const TreePathMeasure& tree);

/// (L + a) / (1 + a).
std::vector<double> mix(std::span<const double> L, double a);

/// gamma'_k on every node of levels 0..n-1 (dim 1). Node j at level k fixes
/// the whole history up to t_k, so this is a general adapted drift; `delay`
/// records how far back it actually looks.
struct RetardedTreeControl {
  NodeFunction gamma;
  std::size_t delay = 0;
};

struct PipelineDiagnostics {
  double l1_LlogL = 0.0;  // E|N log N - L log L|
  double l1_logL = 0.0;   // E|N log L - L log L|
  double energy = 0.0;    // max over paths of |gamma|_H^2
  double mean_density = 0.0;
  // E|.| distances after truncation, mixing, energy capping and delaying,
  // each against the previous stage's x log x.
  std::array<double, 4> stage_errors{};
};

struct PipelineResult {
  RetardedTreeControl control;
  PipelineDiagnostics diagnostics;
  std::vector<double> density;  // N^eta on every tree path
};

/// Runs the pipeline on a dim-1 tree. N^eta is the tree martingale with
/// representation gamma (additive form), evaluated as the pushforward of
/// the linear tilt by gamma and cross-checked against the direct product.
PipelineResult build_control(std::span<const double> L, const ApproximationParams& params,
                             const TreePathMeasure& tree);

/// y = w - int gamma'(w): the map whose law is approximated.
Path apply_retarded_shift(const RetardedTreeControl& control, const TreePathMeasure& tree, std::size_t path);

/// Recovers the tree path w from y = w - int gamma'(w) step by step. Each
/// recovered increment is snapped to +-sqrt(dt); throws if y is not in the
/// image or the control has delay 0.
std::size_t invert_retarded(const RetardedTreeControl& control, const TreePathMeasure& tree, const Path& observed);

/// Rule -u for a rule u.
class NegatedRule final : public ShiftRule {
 public:
  explicit NegatedRule(const ShiftRule& inner) : inner_(inner) {}
  Adaptedness adaptedness() const override { return inner_.adaptedness(); }
  std::size_t dim() const override { return inner_.dim(); }
  void density(std::size_t k, const HistoryView& x, const HistoryView& b, Eigen::Ref<Vector> out) const override {
    inner_.density(k, x, b, out);
    out = -out;
  }

 private:
  const ShiftRule& inner_;
};

/// Continuous-path inversion of X^{-gamma}: given the observed pair
/// (X^obs, beta^obs) = X^{-gamma}(X, beta), rebuilds beta and X node by node
/// using beta_k+1 = beta_k + dbeta^obs_k + gamma'_k dt, where gamma'_k reads
/// only already recovered nodes.
PerturbedPair invert_retarded(const CoefficientField& coeffs, const ShiftRule& gamma, const Path& x_observed,
                              const Path& beta_observed);

/// Approximate continuous-path control for a target density functional.
/// Conditional expectations are replaced by per-level least squares on the
/// polynomial features (1, x, ..., x^degree) of the current state.
class RegressionControl {
 public:
  /// Fits alpha'_k(x) = C_k(x) / max(M_k(x), a / (1 + a)), where M_k
  /// regresses the mixed density and C_k regresses density * dbeta_k / dt.
  /// m = d = 1 only.
  static RegressionControl fit(const PathFunctional& L, const CoefficientField& coeffs,
                               const ApproximationParams& params, const TimeGrid& grid, std::size_t n_paths,
                               const RandomStream& stream, std::size_t degree = 2);

  /// alpha' at level k and state x (before capping and delaying).
  double alpha(std::size_t k, double x) const;
  /// The delayed, energy-capped control as an adapted rule with delay eta.
  RetardedRule rule() const;

  const ApproximationParams& params() const { return params_; }

 private:
  ApproximationParams params_;
  TimeGrid grid_{1};
  std::size_t degree_ = 2;
  double floor_ = 0.0;
  std::vector<Vector> m_coef_;
  std::vector<Vector> c_coef_;
};

}  // namespace diffvar
