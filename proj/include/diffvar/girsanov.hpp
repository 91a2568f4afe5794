#pragma once

// Wick exponentials in log form, Girsanov reweighted expectations and
// relative-entropy estimates for shifted laws.

#include <functional>
#include <string>

#include "diffvar/discrete_oracle.hpp"
#include "diffvar/functional.hpp"
#include "diffvar/sde_engine.hpp"
#include "diffvar/statistics.hpp"

namespace diffvar {

/// log rho(delta_beta v) = sum_k <v'_k, dbeta_k> - 1/2 sum_k |v'_k|^2 dt.
double log_wick(const CameronMartinShift& v, const RowMatrix& driver_increments);

struct GirsanovOptions {
  /// Test hook: use rho(+delta u) instead of rho(-delta u). Breaks the identity on purpose.
  bool flip_wick_sign = false;
  /// Fraction of non-finite samples tolerated before NumericalFailure.
  double max_reject_fraction = 1e-3;
};

struct GirsanovEstimate {
  EstimateWithError lhs;     // E[f(X, beta)]
  EstimateWithError rhs;     // E[f(X^u, beta + u) rho(-delta u)]
  EstimateWithError weight;  // E[rho(-delta u)]
  std::size_t rejected = 0;
  bool agrees(double n_se = 3.0) const;
};

/// Both sides of E[f(X)] = E[f(X^u) rho(-delta_beta u)] on common random
/// numbers: path i uses stream.offset(i) for its driver, and u is evaluated
/// on w = (X, beta). Paths with a non-finite sample on either side are
/// dropped from both and counted.
GirsanovEstimate reweighted_expectation(const PathFunctional& f, const CoefficientField& coeffs,
                                        const ShiftRule& u, const TimeGrid& grid, std::size_t n_paths,
                                        const RandomStream& stream, const GirsanovOptions& options = {});

/// 1/2 E|u|_H^2, the relative entropy of the shifted law when the shift map
/// is left-invertible. Accepts deterministic and strictly retarded rules only.
EstimateWithError entropy_if_invertible(const ShiftRule& u, const CoefficientField& coeffs, const TimeGrid& grid,
                                        std::size_t n_paths, const RandomStream& stream);

struct EntropyBoundReport {
  std::string mode;           // "exact_tree" or "monte_carlo"
  EstimateWithError kl;       // relative entropy of the shifted law
  EstimateWithError kinetic;  // 1/2 E|u|_H^2
  double tolerance = 0.0;     // 3 combined standard errors
  bool holds = false;         // kl <= kinetic + tolerance
  double gap() const { return kinetic.value - kl.value; }
};

/// Plug-in check on simulated paths: the entropy estimate is the sample mean
/// of -log rho(-delta u) = sum u' dbeta + 1/2 |u|^2, exact in expectation for
/// invertible shifts.
EntropyBoundReport entropy_upper_bound_check(const ShiftRule& u, const CoefficientField& coeffs,
                                             const TimeGrid& grid, std::size_t n_paths,
                                             const RandomStream& stream);

/// Path map on the tree: writes the image of driver path w into y. The image
/// must again be a tree path (increments +-sqrt(dt)).
using TreePathMap = std::function<void(const Path& w, Path& y)>;

/// Exact check on the tree: the pushforward of p under `map`, its relative
/// entropy, and the kinetic energy 1/2 E_p sum_k |dy_k - dw_k|^2 / dt.
EntropyBoundReport entropy_upper_bound_check(const TreePathMap& map, const TreePathMeasure& tree);

/// Pushforward masses of p under a tree path map.
std::vector<double> pushforward_of_map(const TreePathMap& map, const TreePathMeasure& tree);

/// Discrete Tanaka map in dim 1: dy_k = sign(w_k) dw_k with sign(0) = +1.
/// On the tree it is a bijection whose pushforward is p itself, so its
/// relative entropy is 0 while its kinetic energy is not.
TreePathMap tanaka_map();

/// Reflected walk in dim 1: y = |w|, i.e. dy_k = sign(w_k) dw_k away from 0
/// and dy_k = +sqrt(dt) at 0. Mirror images of a path after a visit to 0
/// share the same image, so the map is not injective.
TreePathMap reflection_map();

}  // namespace diffvar
