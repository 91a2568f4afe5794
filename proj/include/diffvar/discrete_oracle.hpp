#pragma once

// Exact finite path space: the scaled +-sqrt(dt) random walk in dim
// coordinates. Every path has probability 2^(-dim n_steps), so free
// energies, relative entropies, conditional expectations and the adapted
// control problem can be computed by enumeration and backward induction.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "diffvar/functional.hpp"
#include "diffvar/path_core.hpp"
#include "diffvar/sde_engine.hpp"

namespace diffvar {

inline constexpr std::size_t kMaxTreeBits = 22;

/// Path index layout: step 0 occupies the most significant dim bits, so the
/// ancestor of a path at level k is index >> (dim (n_steps - k)) and the
/// children of node j at level k are j * 2^dim + code, code in [0, 2^dim).
/// Bit i of a child code set means coordinate i moves up.
class TreePathMeasure {
 public:
  TreePathMeasure(TimeGrid grid, std::size_t dim);

  const TimeGrid& grid() const { return grid_; }
  std::size_t dim() const { return dim_; }
  std::size_t n_steps() const { return grid_.n_steps(); }
  std::size_t branching() const { return std::size_t{1} << dim_; }
  std::size_t path_count() const { return std::size_t{1} << (dim_ * n_steps()); }
  std::size_t nodes_at(std::size_t level) const { return std::size_t{1} << (dim_ * level); }
  double path_probability() const { return path_probability_; }
  double log_path_count() const;

  std::size_t ancestor(std::size_t path, std::size_t level) const {
    return path >> (dim_ * (n_steps() - level));
  }
  /// Child code used on step k (k < n_steps) by `path`.
  std::size_t step_code(std::size_t path, std::size_t k) const {
    return (path >> (dim_ * (n_steps() - k - 1))) & (branching() - 1);
  }
  /// +sqrt(dt) or -sqrt(dt) for coordinate i of child code `code`.
  double increment(std::size_t code, std::size_t i) const {
    return ((code >> i) & 1U) ? grid_.sqrt_dt() : -grid_.sqrt_dt();
  }

  /// Driver increments (n_steps x dim) of a path.
  void increments(std::size_t path, RowMatrix& out) const;
  Path driver_path(std::size_t path) const;
  /// Index of the tree path whose increments are closest to those of w;
  /// throws InvalidInput if some increment is farther than `tolerance` from +-sqrt(dt).
  std::size_t index_of(const Path& w, double tolerance = 1e-9) const;

 private:
  TimeGrid grid_;
  std::size_t dim_;
  double path_probability_;
};

/// One value (or `width` values) per tree node, stored level by level.
class NodeFunction {
 public:
  NodeFunction() = default;
  /// Levels 0..last_level inclusive.
  NodeFunction(const TreePathMeasure& tree, std::size_t last_level, std::size_t width = 1);

  std::size_t levels() const { return levels_.size(); }
  std::size_t width() const { return width_; }
  double& at(std::size_t level, std::size_t node, std::size_t i = 0) { return levels_[level][node * width_ + i]; }
  double at(std::size_t level, std::size_t node, std::size_t i = 0) const { return levels_[level][node * width_ + i]; }
  std::span<double> level(std::size_t k) { return levels_[k]; }
  std::span<const double> level(std::size_t k) const { return levels_[k]; }

 private:
  std::size_t width_ = 1;
  std::vector<std::vector<double>> levels_;
};

/// Values f(w) for every tree path. The state path is X = Euler(coeffs, w)
/// when coefficients are given (driver dim must match the tree), else X = w.
std::vector<double> evaluate_on_tree(const PathFunctional& f, const TreePathMeasure& tree,
                                     const CoefficientField* coeffs = nullptr);

/// -log sum_w p_w e^{-f(w)} by log-sum-exp. Non-finite values are rejected
/// with the offending path index.
double exact_free_energy(std::span<const double> f, const TreePathMeasure& tree);

/// sum_w q_w log(q_w / p_w), with 0 log 0 = 0.
double exact_relative_entropy(std::span<const double> q, const TreePathMeasure& tree);

/// E_q[f] for a measure given by path masses.
double expectation(std::span<const double> q, std::span<const double> f);

/// theta_0 = e^{-f} p / E[e^{-f}] as path masses.
std::vector<double> gibbs_measure(std::span<const double> f, const TreePathMeasure& tree);

struct GibbsReport {
  double free_energy = 0.0;    // -log E[e^{-f}]
  double gibbs_value = 0.0;    // E_{theta_0}[f] + H(theta_0 | p)
  double residual = 0.0;       // |gibbs_value - free_energy|
  double min_perturbed = 0.0;  // smallest E_theta[f] + H(theta | p) over the perturbations
  std::size_t n_perturbations = 0;
  std::size_t n_below = 0;  // perturbations below free_energy - 1e-12
  std::vector<double> theta0;
};

/// Evaluates both sides of the Gibbs principle and probes minimality with
/// random perturbations theta ~ theta_0 * exp(noise), renormalized.
GibbsReport gibbs_check(std::span<const double> f, const TreePathMeasure& tree, std::size_t n_perturbations = 100,
                        std::uint64_t seed = 1);

struct DynamicProgramResult {
  double value = 0.0;
  NodeFunction value_function;  // V_k, levels 0..n
  NodeFunction kernels;         // levels 0..n-1, width 2^dim: optimal child probabilities
};

/// V_n = f, V_k = -log E[e^{-V_{k+1}} | node]; optimal kernels q ~ p e^{-V_{k+1}}.
DynamicProgramResult dp_adapted_infimum(std::span<const double> f, const TreePathMeasure& tree);

/// E_q[f] + sum_k E_q[KL(q_k || p_k)] for adapted kernels, computed forward.
double adapted_objective(std::span<const double> f, const NodeFunction& kernels, const TreePathMeasure& tree);

/// Path masses induced by adapted kernels.
std::vector<double> kernel_path_measure(const NodeFunction& kernels, const TreePathMeasure& tree);

enum class TiltKind {
  exponential,  // q(up) proportional to e^{a sqrt(dt)}, coordinatewise
  linear        // q(up) = (1 + a sqrt(dt)) / 2, the additive representation
};

/// Per-node drift a (width dim) on levels 0..n-1 to kernels. Throws with the
/// offending node if a probability leaves (0, 1).
NodeFunction tilt_kernels(const NodeFunction& drift, const TreePathMeasure& tree, TiltKind kind);

/// Law of the shifted walk under the tilt: exact path masses, total mass 1.
std::vector<double> pushforward_measure(const NodeFunction& drift, const TreePathMeasure& tree,
                                        TiltKind kind = TiltKind::exponential);
/// Deterministic shift: the drift on level k is u'_k at every node.
std::vector<double> pushforward_measure(const CameronMartinShift& shift, const TreePathMeasure& tree,
                                        TiltKind kind = TiltKind::exponential);
NodeFunction drift_from_shift(const CameronMartinShift& shift, const TreePathMeasure& tree);

/// 1/2 E_q[sum_k |a_k|^2 dt] with the drift read along q-distributed paths.
double tilt_kinetic_energy(const NodeFunction& drift, std::span<const double> q, const TreePathMeasure& tree);

/// M_k(node) = E[L | node]; requires E[L] = 1 to 1e-12.
NodeFunction doob_martingale(std::span<const double> L, const TreePathMeasure& tree);

struct MartingaleRepresentation {
  NodeFunction alpha;       // levels 0..n-1, width dim
  double max_residual = 0;  // max |M_child - M (1 + alpha . dbeta)| (0 in dim 1)
};

/// Solves Delta M = alpha M Delta beta node by node. In dim 1 this is exact;
/// for dim > 1 alpha is the least-squares projection onto the increments.
MartingaleRepresentation martingale_representation(const NodeFunction& M, const TreePathMeasure& tree);

/// M_0 = m0, M_child = M (1 + alpha . Delta beta).
NodeFunction reconstruct_martingale(const NodeFunction& alpha, const TreePathMeasure& tree, double m0 = 1.0);

/// sum over nodes of p_node |alpha|^2 dt = E[sum_k |alpha_k|^2 dt].
double representation_energy(const NodeFunction& alpha, const TreePathMeasure& tree);

}  // namespace diffvar
