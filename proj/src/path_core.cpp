#include "diffvar/path_core.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "diffvar/errors.hpp"

namespace diffvar {

TimeGrid::TimeGrid(std::size_t n_steps)
    : n_steps_(n_steps),
      dt_(n_steps == 0 ? 0.0 : 1.0 / static_cast<double>(n_steps)),
      sqrt_dt_(std::sqrt(dt_)) {
  if (n_steps == 0) throw InvalidInput("time grid needs at least one step");
}

Path::Path(TimeGrid grid, std::size_t dim)
    : grid_(grid), values_(RowMatrix::Zero(static_cast<Eigen::Index>(grid.n_steps() + 1),
                                           static_cast<Eigen::Index>(dim))) {
  if (dim == 0) throw InvalidInput("path dimension must be positive");
}

Path::Path(TimeGrid grid, RowMatrix values) : grid_(grid), values_(std::move(values)) {
  if (static_cast<std::size_t>(values_.rows()) != grid_.n_steps() + 1)
    throw InvalidInput("path needs n_steps + 1 nodes");
  if (values_.cols() == 0) throw InvalidInput("path dimension must be positive");
}

Path Path::from_increments(TimeGrid grid, const RowMatrix& increments, const Vector& start) {
  if (static_cast<std::size_t>(increments.rows()) != grid.n_steps())
    throw InvalidInput("increment count does not match the grid");
  if (start.size() != increments.cols()) throw InvalidInput("start point has the wrong dimension");
  Path path(grid, static_cast<std::size_t>(increments.cols()));
  path.values_.row(0) = start.transpose();
  for (Eigen::Index k = 0; k < increments.rows(); ++k)
    path.values_.row(k + 1) = path.values_.row(k) + increments.row(k);
  return path;
}

Path Path::from_increments(TimeGrid grid, const RowMatrix& increments) {
  return from_increments(grid, increments, Vector::Zero(increments.cols()));
}

RowMatrix Path::increments() const {
  const Eigen::Index n = values_.rows() - 1;
  return values_.bottomRows(n) - values_.topRows(n);
}

Adaptedness Adaptedness::combine(const Adaptedness& a, const Adaptedness& b) {
  if (a.kind == Kind::path_functional && b.kind == Kind::path_functional)
    return path_functional(std::min(a.delay, b.delay));
  if (a.kind == Kind::path_functional) return b.kind == Kind::deterministic ? a : path_functional(0);
  if (b.kind == Kind::path_functional) return a.kind == Kind::deterministic ? b : path_functional(0);
  if (a.kind == Kind::markov_feedback || b.kind == Kind::markov_feedback) return markov_feedback();
  return deterministic();
}

const char* to_string(Adaptedness::Kind kind) {
  switch (kind) {
    case Adaptedness::Kind::deterministic:
      return "deterministic";
    case Adaptedness::Kind::markov_feedback:
      return "markov_feedback";
    case Adaptedness::Kind::path_functional:
      return "path_functional";
  }
  return "unknown";
}

CameronMartinShift::CameronMartinShift(TimeGrid grid, RowMatrix density, Adaptedness adaptedness)
    : grid_(grid), density_(std::move(density)), adaptedness_(adaptedness) {
  if (static_cast<std::size_t>(density_.rows()) != grid_.n_steps())
    throw InvalidInput("shift density needs one row per grid step");
  if (density_.cols() == 0) throw InvalidInput("shift dimension must be positive");
}

CameronMartinShift CameronMartinShift::zero(TimeGrid grid, std::size_t dim) {
  return {grid, RowMatrix::Zero(static_cast<Eigen::Index>(grid.n_steps()),
                                static_cast<Eigen::Index>(dim))};
}

CameronMartinShift CameronMartinShift::constant(TimeGrid grid, const Vector& rate) {
  RowMatrix density(static_cast<Eigen::Index>(grid.n_steps()), rate.size());
  density.rowwise() = rate.transpose();
  return {grid, std::move(density)};
}

CameronMartinShift CameronMartinShift::scaled(double factor) const {
  return {grid_, density_ * factor, adaptedness_};
}

CameronMartinShift operator+(const CameronMartinShift& a, const CameronMartinShift& b) {
  if (!(a.grid() == b.grid()) || a.dim() != b.dim())
    throw InvalidInput("cannot add shifts on different grids or dimensions");
  return {a.grid(), a.density() + b.density(),
          Adaptedness::combine(a.adaptedness(), b.adaptedness())};
}

double cm_norm_sq(const CameronMartinShift& u) {
  return u.density().squaredNorm() * u.grid().dt();
}

Path integrate_density(const CameronMartinShift& u) {
  const double dt = u.grid().dt();
  Path h(u.grid(), u.dim());
  for (std::size_t k = 0; k < u.grid().n_steps(); ++k) h.node(k + 1) = h.node(k) + u.rate(k) * dt;
  return h;
}

std::uint64_t SplitMix64::mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SplitMix64::result_type SplitMix64::operator()() {
  state_ += 0x9e3779b97f4a7c15ULL;
  return mix(state_);
}

SplitMix64 RandomStream::engine() const {
  return SplitMix64(SplitMix64::mix(master_seed) ^
                    SplitMix64::mix(stream_id * 0xd1b54a32d192ed03ULL + 0x8cb92ba72f3d8dd7ULL));
}

RandomStream RandomStream::derive(std::uint64_t tag) const {
  return {SplitMix64::mix(master_seed ^ SplitMix64::mix(tag + 0x632be59bd9b4e019ULL)) ^ stream_id,
          0};
}

void fill_brownian_increments(const RandomStream& stream, const TimeGrid& grid, RowMatrix& out) {
  if (static_cast<std::size_t>(out.rows()) != grid.n_steps())
    throw InvalidInput("increment buffer has the wrong number of rows");
  auto engine = stream.engine();
  std::normal_distribution<double> normal(0.0, grid.sqrt_dt());
  for (Eigen::Index k = 0; k < out.rows(); ++k)
    for (Eigen::Index i = 0; i < out.cols(); ++i) out(k, i) = normal(engine);
}

RowMatrix brownian_increments(const RandomStream& stream, const TimeGrid& grid, std::size_t dim) {
  if (dim == 0) throw InvalidInput("increment dimension must be positive");
  RowMatrix out(static_cast<Eigen::Index>(grid.n_steps()), static_cast<Eigen::Index>(dim));
  fill_brownian_increments(stream, grid, out);
  return out;
}

}  // namespace diffvar
