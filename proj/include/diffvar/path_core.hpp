#pragma once

// Time grids, discretized paths, Cameron-Martin shifts and reproducible
// Brownian increments. Every other module is built on these types.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>

#include <Eigen/Dense>

namespace diffvar {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Uniform grid on [0, 1] with nodes t_k = k / n_steps.
class TimeGrid {
 public:
  explicit TimeGrid(std::size_t n_steps);

  std::size_t n_steps() const { return n_steps_; }
  static constexpr double horizon() { return 1.0; }
  double dt() const { return dt_; }
  double sqrt_dt() const { return sqrt_dt_; }
  double node(std::size_t k) const {
    return static_cast<double>(k) / static_cast<double>(n_steps_);
  }

  bool operator==(const TimeGrid& other) const { return n_steps_ == other.n_steps_; }

 private:
  std::size_t n_steps_;
  double dt_;
  double sqrt_dt_;
};

/// Trajectory sampled at the n_steps + 1 grid nodes; row k holds the value at t_k.
class Path {
 public:
  Path(TimeGrid grid, std::size_t dim);
  Path(TimeGrid grid, RowMatrix values);

  /// Cumulative sum of `increments` (n_steps x dim) started at `start`.
  static Path from_increments(TimeGrid grid, const RowMatrix& increments, const Vector& start);
  static Path from_increments(TimeGrid grid, const RowMatrix& increments);

  const TimeGrid& grid() const { return grid_; }
  std::size_t dim() const { return static_cast<std::size_t>(values_.cols()); }
  std::size_t node_count() const { return static_cast<std::size_t>(values_.rows()); }

  auto node(std::size_t k) const { return values_.row(static_cast<Eigen::Index>(k)); }
  auto node(std::size_t k) { return values_.row(static_cast<Eigen::Index>(k)); }
  double at(std::size_t k, std::size_t i) const {
    return values_(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i));
  }
  Vector terminal() const { return values_.row(values_.rows() - 1).transpose(); }

  const RowMatrix& values() const { return values_; }
  RowMatrix& values() { return values_; }

  /// Row k is value(t_{k+1}) - value(t_k).
  RowMatrix increments() const;

 private:
  TimeGrid grid_;
  RowMatrix values_;
};

/// How the density of a shift may depend on the underlying path.
struct Adaptedness {
  enum class Kind { deterministic, markov_feedback, path_functional };

  Kind kind = Kind::deterministic;
  // Only meaningful for path_functional: density on step k reads nodes 0..k-delay.
  std::size_t delay = 0;

  static Adaptedness deterministic() { return {Kind::deterministic, 0}; }
  static Adaptedness markov_feedback() { return {Kind::markov_feedback, 0}; }
  static Adaptedness path_functional(std::size_t delay) { return {Kind::path_functional, delay}; }

  /// Adaptedness of a sum of two shifts: the weaker of the two.
  static Adaptedness combine(const Adaptedness& a, const Adaptedness& b);

  bool operator==(const Adaptedness&) const = default;
};

const char* to_string(Adaptedness::Kind kind);

/// Element u of the Cameron-Martin space, stored as its piecewise-constant
/// density: row k of `density()` is the value of u' on [t_k, t_{k+1}).
class CameronMartinShift {
 public:
  CameronMartinShift(TimeGrid grid, RowMatrix density,
                     Adaptedness adaptedness = Adaptedness::deterministic());

  static CameronMartinShift zero(TimeGrid grid, std::size_t dim);
  static CameronMartinShift constant(TimeGrid grid, const Vector& rate);

  const TimeGrid& grid() const { return grid_; }
  std::size_t dim() const { return static_cast<std::size_t>(density_.cols()); }
  const RowMatrix& density() const { return density_; }
  RowMatrix& density() { return density_; }
  auto rate(std::size_t k) const { return density_.row(static_cast<Eigen::Index>(k)); }
  const Adaptedness& adaptedness() const { return adaptedness_; }

  CameronMartinShift scaled(double factor) const;
  CameronMartinShift operator-() const { return scaled(-1.0); }
  friend CameronMartinShift operator+(const CameronMartinShift& a, const CameronMartinShift& b);

 private:
  TimeGrid grid_;
  RowMatrix density_;
  Adaptedness adaptedness_;
};

/// |u|_H^2 = sum_k |u'_k|^2 dt.
double cm_norm_sq(const CameronMartinShift& u);

/// h(t_k) = sum_{j<k} u'_j dt, h(0) = 0.
Path integrate_density(const CameronMartinShift& u);

/// SplitMix64: a counter-based generator. The state advances by a fixed
/// odd constant and each output is a bijective mix of the counter.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t state) : state_(state) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()();

  static std::uint64_t mix(std::uint64_t z);

 private:
  std::uint64_t state_;
};

/// Identifies one reproducible random sequence. Simulations use one stream
/// per path (stream_id = base + path index), so results never depend on how
/// paths are scheduled across threads.
struct RandomStream {
  std::uint64_t master_seed = 0;
  std::uint64_t stream_id = 0;

  SplitMix64 engine() const;
  RandomStream offset(std::uint64_t k) const { return {master_seed, stream_id + k}; }
  /// Independent family of streams keyed by `tag`, e.g. one per optimizer iteration.
  RandomStream derive(std::uint64_t tag) const;
};

/// n_steps x dim matrix of independent N(0, dt) increments.
RowMatrix brownian_increments(const RandomStream& stream, const TimeGrid& grid, std::size_t dim);

/// Same as brownian_increments, written into a preallocated n_steps x dim matrix.
void fill_brownian_increments(const RandomStream& stream, const TimeGrid& grid, RowMatrix& out);

}  // namespace diffvar
