#pragma once

// Monte Carlo side of -log E[e^{-f}] = inf_u E[f o X^u + 1/2 |u|_H^2]:
// direct free-energy estimates, parametrized adapted controls, the control
// objective with pathwise gradients, a stochastic optimizer and attainment
// diagnostics on simulated paths and on the tree.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffvar/discrete_oracle.hpp"
#include "diffvar/functional.hpp"
#include "diffvar/sde_engine.hpp"
#include "diffvar/statistics.hpp"

namespace diffvar {

struct FreeEnergyEstimate {
  EstimateWithError estimate;  // -log mean e^{-f}, delta-method standard error
  double log_bias = 0.0;       // leading O(1/n) bias of the plug-in logarithm (reported, not corrected)
  std::size_t rejected = 0;
};

/// -log E[e^{-f(X, beta)}] with max-shift stabilization. Path i uses stream.offset(i).
FreeEnergyEstimate estimate_free_energy(const PathFunctional& f, const CoefficientField& coeffs,
                                        const TimeGrid& grid, std::size_t n_paths, const RandomStream& stream);

/// A parametrized control on a fixed grid, u'_k = clip(v(theta, t_k, X^u_k)), clipped to norm <= clip_bound.
class ControlFamily {
 public:
  enum class Kind { constant, piecewise_constant, linear_feedback, rbf_feedback };

  /// One rate vector for the whole horizon.
  static ControlFamily constant(std::size_t d, const TimeGrid& grid, double clip_bound);
  /// `segments` equal blocks of steps, one rate vector per block.
  static ControlFamily piecewise_constant(std::size_t d, std::size_t segments, const TimeGrid& grid, double clip_bound);
  /// u'_k = A_k x + c_k with one (A_k, c_k) per grid step.
  static ControlFamily linear_feedback(std::size_t m, std::size_t d, const TimeGrid& grid, double clip_bound);
  /// u'_k = sum_j W_{s(k), j} exp(-|x - z_j|^2 / (2 width^2)) with `slices` time slices.
  static ControlFamily rbf_feedback(std::size_t m, std::size_t d, std::vector<Vector> centers, double width,
                                    std::size_t slices, const TimeGrid& grid, double clip_bound);

  Kind kind() const { return kind_; }
  std::string kind_name() const;
  std::size_t m() const { return m_; }
  std::size_t d() const { return d_; }
  std::size_t n_params() const { return n_params_; }
  double clip_bound() const { return clip_bound_; }
  const TimeGrid& grid() const { return grid_; }
  bool is_feedback() const { return kind_ == Kind::linear_feedback || kind_ == Kind::rbf_feedback; }
  /// "structural" for deterministic families, "assumed" for Markov feedback.
  const char* invertibility() const { return is_feedback() ? "assumed" : "structural"; }

  /// Unclipped v on step k at state x.
  void raw(const Vector& params, std::size_t k, const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const;
  /// Clipped rate; returns true when clipping was active.
  bool evaluate(const Vector& params, std::size_t k, const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> out) const;
  /// grad += (dv/dtheta)^T xi for the unclipped v on step k.
  void accumulate_param_gradient(const Vector& params, std::size_t k, const Eigen::Ref<const Vector>& x,
                                 const Eigen::Ref<const Vector>& xi, Eigen::Ref<Vector> grad) const;
  /// dv/dx (d x m) on step k.
  void state_jacobian(const Vector& params, std::size_t k, const Eigen::Ref<const Vector>& x,
                      Eigen::Ref<Matrix> out) const;
  /// Weight of each parameter in the L2(dt) metric used to precondition gradients.
  const Vector& metric() const { return metric_; }

  /// All-zero parameters, i.e. u = 0.
  Vector zero_params() const { return Vector::Zero(static_cast<Eigen::Index>(n_params_)); }

 private:
  ControlFamily(Kind kind, std::size_t m, std::size_t d, const TimeGrid& grid, double clip_bound);
  std::size_t block(std::size_t k) const;  // segment or slice of step k

  Kind kind_;
  std::size_t m_;
  std::size_t d_;
  TimeGrid grid_;
  double clip_bound_;
  std::size_t n_params_ = 0;
  std::size_t blocks_ = 1;
  std::vector<Vector> centers_;
  double width_ = 1.0;
  Vector metric_;
};

struct ObjectiveEstimate {
  EstimateWithError estimate;  // mean of f(X^u, beta + u) + 1/2 |u|_H^2
  EstimateWithError kinetic;   // mean of 1/2 |u|_H^2
  std::size_t clipped_steps = 0;
  Vector gradient;  // pathwise gradient in theta when requested, else empty
};

/// J(u) on n_paths paths from `stream` (path i uses stream.offset(i)), so
/// equal streams give common random numbers across parameter values.
ObjectiveEstimate objective(const PathFunctional& f, const CoefficientField& coeffs, const ControlFamily& family,
                            const Vector& params, std::size_t n_paths, const RandomStream& stream,
                            bool with_gradient = false);

enum class GradientMode { spsa, finite_diff, pathwise };
const char* to_string(GradientMode mode);

struct OptimizerOptions {
  std::size_t max_iter = 200;
  double step = 0.5;         // gain a in a_k = a ((1 + A) / (k + 1 + A))^0.602
  double perturbation = 0.1; // SPSA / finite difference c in c_k = c / (k + 1)^0.101
  GradientMode grad_mode = GradientMode::spsa;
  double tol = 0.0;          // stop when the metric norm of a step falls below tol
  std::size_t paths_per_iter = 10'000;
  std::size_t final_paths = 100'000;
  std::size_t divergence_window = 10;
};

struct IterationRecord {
  std::size_t iteration = 0;
  EstimateWithError objective;
  double step_norm = 0.0;
};

struct AttainmentStatistic {
  std::string mode;               // "tree" or "monte_carlo"
  double statistic = 0.0;         // total variation (tree) or max standardized discrepancy
  std::vector<double> per_test;   // standardized discrepancy per test functional (monte_carlo)
};

struct VariationalReport {
  FreeEnergyEstimate direct;
  EstimateWithError j_star;        // best parameters re-estimated on fresh paths
  EstimateWithError j_best_raw;    // best-seen batch estimate during optimization
  double gap = 0.0;                // j_star - direct
  bool violation = false;          // gap < -3 combined standard errors
  double min_standardized_gap = 0.0;  // min over all J estimates of (J - direct) / combined se
  std::size_t iterations = 0;
  std::string status;              // "converged", "max_iter" or "diverged"
  std::string invertibility;       // "structural" or "assumed"
  std::size_t clipped_steps = 0;
  Vector best_params;
  std::vector<IterationRecord> trace;
  std::vector<Vector> param_trace;
  std::optional<AttainmentStatistic> attainment;
};

/// Stochastic descent of J over the family's parameters. Iteration i draws
/// its batch from stream.derive(i + 1), fixed within the iteration; the
/// final re-estimate and the direct free energy use further independent
/// streams. J increasing for divergence_window consecutive iterations aborts
/// with status "diverged".
VariationalReport optimize(const PathFunctional& f, const CoefficientField& coeffs, const ControlFamily& family,
                           const OptimizerOptions& options, const RandomStream& stream,
                           const Vector* initial_params = nullptr);

struct TreeAttainment {
  double total_variation = 0.0;  // between the controlled law and theta_0
  double objective = 0.0;        // E_q[f] + KL(q || p)
  double free_energy = 0.0;
  double excess = 0.0;           // objective - free_energy >= 0
};

/// Exact comparison on the tree of the law q induced by adapted kernels with
/// the Gibbs measure theta_0 = e^{-f} p / E[e^{-f}].
TreeAttainment attainment_check(std::span<const double> f, const NodeFunction& kernels, const TreePathMeasure& tree);

/// Drift of a control family along tree nodes (state = the node's driver path,
/// or its Euler image under `coeffs`), ready for tilt_kernels.
NodeFunction family_drift_on_tree(const ControlFamily& family, const Vector& params, const TreePathMeasure& tree,
                                  const CoefficientField* coeffs = nullptr);

/// Monte Carlo mode: compares E[g(X^u)] with E[g(X) e^{-f}] / E[e^{-f}] for
/// ten fixed test functions g of the terminal state, on independent streams.
AttainmentStatistic attainment_check(const PathFunctional& f, const CoefficientField& coeffs,
                                     const ControlFamily& family, const Vector& params, std::size_t n_paths,
                                     const RandomStream& stream);

}  // namespace diffvar
