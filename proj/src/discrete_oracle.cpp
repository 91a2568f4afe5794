#include "diffvar/discrete_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include <fmt/core.h>

#include "diffvar/errors.hpp"
#include "diffvar/parallel.hpp"
#include "diffvar/statistics.hpp"

namespace diffvar {

TreePathMeasure::TreePathMeasure(TimeGrid grid, std::size_t dim) : grid_(grid), dim_(dim) {
  if (dim_ == 0) throw InvalidInput("tree dimension must be positive");
  if (dim_ * grid_.n_steps() > kMaxTreeBits)
    throw InvalidInput(fmt::format("tree with dim * n_steps = {} exceeds the enumeration guard {}",
                                   dim_ * grid_.n_steps(), kMaxTreeBits));
  path_probability_ = std::ldexp(1.0, -static_cast<int>(dim_ * grid_.n_steps()));
}

double TreePathMeasure::log_path_count() const {
  return static_cast<double>(dim_ * n_steps()) * std::numbers::ln2;
}

void TreePathMeasure::increments(std::size_t path, RowMatrix& out) const {
  const auto n = static_cast<Eigen::Index>(n_steps());
  const auto d = static_cast<Eigen::Index>(dim_);
  if (out.rows() != n || out.cols() != d) out.resize(n, d);
  for (std::size_t k = 0; k < n_steps(); ++k) {
    const std::size_t code = step_code(path, k);
    for (std::size_t i = 0; i < dim_; ++i)
      out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = increment(code, i);
  }
}

Path TreePathMeasure::driver_path(std::size_t path) const {
  if (path >= path_count()) throw InvalidInput(fmt::format("path index {} out of range", path));
  RowMatrix inc;
  increments(path, inc);
  return Path::from_increments(grid_, inc);
}

std::size_t TreePathMeasure::index_of(const Path& w, double tolerance) const {
  if (!(w.grid() == grid_) || w.dim() != dim_) throw InvalidInput("path does not live on this tree");
  std::size_t index = 0;
  const double h = grid_.sqrt_dt();
  for (std::size_t k = 0; k < n_steps(); ++k) {
    std::size_t code = 0;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double inc = w.at(k + 1, i) - w.at(k, i);
      const bool up = inc > 0.0;
      if (std::abs(std::abs(inc) - h) > tolerance)
        throw InvalidInput(fmt::format("increment {} of coordinate {} on step {} is not +-sqrt(dt)", inc, i, k));
      if (up) code |= std::size_t{1} << i;
    }
    index = (index << dim_) | code;
  }
  return index;
}

NodeFunction::NodeFunction(const TreePathMeasure& tree, std::size_t last_level, std::size_t width)
    : width_(width) {
  if (last_level > tree.n_steps()) throw InvalidInput("node function deeper than the tree");
  levels_.resize(last_level + 1);
  for (std::size_t k = 0; k <= last_level; ++k) levels_[k].assign(tree.nodes_at(k) * width, 0.0);
}

std::vector<double> evaluate_on_tree(const PathFunctional& f, const TreePathMeasure& tree,
                                     const CoefficientField* coeffs) {
  if (coeffs && coeffs->d() != tree.dim())
    throw InvalidInput("coefficient driving dimension does not match the tree dimension");
  std::vector<double> values(tree.path_count());
  parallel_chunks(tree.path_count(), 1024, [&](std::size_t, std::size_t begin, std::size_t end) {
    RowMatrix inc;
    Path w(tree.grid(), tree.dim());
    std::optional<EulerMaruyama> em;
    std::optional<Path> x;
    if (coeffs) {
      em.emplace(*coeffs);
      x.emplace(tree.grid(), coeffs->m());
    }
    for (std::size_t p = begin; p < end; ++p) {
      tree.increments(p, inc);
      for (Eigen::Index k = 0; k < inc.rows(); ++k) w.values().row(k + 1) = w.values().row(k) + inc.row(k);
      if (coeffs) {
        em->run(tree.grid(), inc, nullptr, x->values());
        values[p] = f(*x, w);
      } else {
        values[p] = f(w, w);
      }
    }
  });
  return values;
}

namespace {

void require_size(std::span<const double> f, const TreePathMeasure& tree) {
  if (f.size() != tree.path_count())
    throw InvalidInput(fmt::format("expected {} path values, got {}", tree.path_count(), f.size()));
}

void require_finite(std::span<const double> f) {
  for (std::size_t p = 0; p < f.size(); ++p)
    if (!std::isfinite(f[p])) throw InvalidInput(fmt::format("functional is not finite on tree path {}", p));
}

// Node masses on every level from path masses.
std::vector<std::vector<double>> node_masses(std::span<const double> q, const TreePathMeasure& tree) {
  const std::size_t n = tree.n_steps();
  std::vector<std::vector<double>> mass(n + 1);
  mass[n].assign(q.begin(), q.end());
  for (std::size_t k = n; k-- > 0;) {
    mass[k].assign(tree.nodes_at(k), 0.0);
    const std::size_t b = tree.branching();
    for (std::size_t j = 0; j < mass[k].size(); ++j)
      mass[k][j] = pairwise_sum(std::span<const double>(mass[k + 1]).subspan(j * b, b));
  }
  return mass;
}

}  // namespace

double exact_free_energy(std::span<const double> f, const TreePathMeasure& tree) {
  require_size(f, tree);
  require_finite(f);
  const double fmin = *std::min_element(f.begin(), f.end());
  std::vector<double> w(f.size());
  for (std::size_t p = 0; p < f.size(); ++p) w[p] = std::exp(-(f[p] - fmin));
  return fmin - std::log(pairwise_sum(w) * tree.path_probability());
}

double exact_relative_entropy(std::span<const double> q, const TreePathMeasure& tree) {
  require_size(q, tree);
  const double log_count = tree.log_path_count();
  std::vector<double> terms(q.size());
  for (std::size_t p = 0; p < q.size(); ++p) {
    if (q[p] < 0.0) throw InvalidInput(fmt::format("negative mass on tree path {}", p));
    terms[p] = q[p] > 0.0 ? q[p] * (std::log(q[p]) + log_count) : 0.0;
  }
  return pairwise_sum(terms);
}

double expectation(std::span<const double> q, std::span<const double> f) {
  if (q.size() != f.size()) throw InvalidInput("measure and functional sizes differ");
  std::vector<double> terms(q.size());
  for (std::size_t p = 0; p < q.size(); ++p) terms[p] = q[p] == 0.0 ? 0.0 : q[p] * f[p];
  return pairwise_sum(terms);
}

std::vector<double> gibbs_measure(std::span<const double> f, const TreePathMeasure& tree) {
  require_size(f, tree);
  require_finite(f);
  const double fmin = *std::min_element(f.begin(), f.end());
  std::vector<double> theta(f.size());
  for (std::size_t p = 0; p < f.size(); ++p) theta[p] = std::exp(-(f[p] - fmin));
  const double total = pairwise_sum(theta);
  for (double& t : theta) t /= total;
  return theta;
}

GibbsReport gibbs_check(std::span<const double> f, const TreePathMeasure& tree, std::size_t n_perturbations,
                        std::uint64_t seed) {
  GibbsReport report;
  report.free_energy = exact_free_energy(f, tree);
  report.theta0 = gibbs_measure(f, tree);
  report.gibbs_value = expectation(report.theta0, f) + exact_relative_entropy(report.theta0, tree);
  report.residual = std::abs(report.gibbs_value - report.free_energy);
  report.n_perturbations = n_perturbations;
  report.min_perturbed = std::numeric_limits<double>::infinity();

  std::vector<double> theta(f.size());
  for (std::size_t j = 0; j < n_perturbations; ++j) {
    SplitMix64 rng(SplitMix64::mix(seed) ^ SplitMix64::mix(j + 1));
    // noise scales from 1e-3 to 3 so both local and far perturbations are probed
    const double scale = 1e-3 * std::pow(3000.0, n_perturbations > 1 ? double(j) / double(n_perturbations - 1) : 0.0);
    std::normal_distribution<double> noise(0.0, scale);
    for (std::size_t p = 0; p < f.size(); ++p) theta[p] = report.theta0[p] * std::exp(noise(rng));
    const double total = pairwise_sum(theta);
    for (double& t : theta) t /= total;
    const double value = expectation(theta, f) + exact_relative_entropy(theta, tree);
    report.min_perturbed = std::min(report.min_perturbed, value);
    if (value < report.free_energy - 1e-12) ++report.n_below;
  }
  return report;
}

DynamicProgramResult dp_adapted_infimum(std::span<const double> f, const TreePathMeasure& tree) {
  require_size(f, tree);
  require_finite(f);
  const std::size_t n = tree.n_steps();
  const std::size_t b = tree.branching();
  const double log_b = std::log(static_cast<double>(b));
  DynamicProgramResult result;
  result.value_function = NodeFunction(tree, n);
  result.kernels = NodeFunction(tree, n - 1, b);
  std::copy(f.begin(), f.end(), result.value_function.level(n).begin());
  std::vector<double> e(b);
  for (std::size_t k = n; k-- > 0;) {
    const auto next = result.value_function.level(k + 1);
    auto here = result.value_function.level(k);
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j) {
      const auto children = next.subspan(j * b, b);
      const double vmin = *std::min_element(children.begin(), children.end());
      for (std::size_t c = 0; c < b; ++c) e[c] = std::exp(-(children[c] - vmin));
      const double sum = pairwise_sum(e);
      const double v = vmin - std::log(sum) + log_b;
      here[j] = v;
      for (std::size_t c = 0; c < b; ++c) result.kernels.at(k, j, c) = e[c] / sum;
    }
  }
  result.value = result.value_function.at(0, 0);
  return result;
}

std::vector<double> kernel_path_measure(const NodeFunction& kernels, const TreePathMeasure& tree) {
  const std::size_t n = tree.n_steps();
  const std::size_t b = tree.branching();
  if (kernels.levels() != n || kernels.width() != b) throw InvalidInput("kernels do not match the tree");
  std::vector<double> mass{1.0}, next;
  for (std::size_t k = 0; k < n; ++k) {
    next.assign(tree.nodes_at(k + 1), 0.0);
    for (std::size_t j = 0; j < mass.size(); ++j)
      for (std::size_t c = 0; c < b; ++c) next[j * b + c] = mass[j] * kernels.at(k, j, c);
    mass.swap(next);
  }
  return mass;
}

double adapted_objective(std::span<const double> f, const NodeFunction& kernels, const TreePathMeasure& tree) {
  require_size(f, tree);
  const std::size_t n = tree.n_steps();
  const std::size_t b = tree.branching();
  if (kernels.levels() != n || kernels.width() != b) throw InvalidInput("kernels do not match the tree");
  const double log_b = std::log(static_cast<double>(b));
  std::vector<double> mass{1.0}, next, kl_terms;
  double running_kl = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    next.assign(tree.nodes_at(k + 1), 0.0);
    kl_terms.assign(mass.size(), 0.0);
    for (std::size_t j = 0; j < mass.size(); ++j) {
      double kl = 0.0;
      for (std::size_t c = 0; c < b; ++c) {
        const double q = kernels.at(k, j, c);
        if (q < 0.0) throw InvalidInput(fmt::format("negative kernel mass at level {} node {}", k, j));
        if (q > 0.0) kl += q * (std::log(q) + log_b);
        next[j * b + c] = mass[j] * q;
      }
      kl_terms[j] = mass[j] * kl;
    }
    running_kl += pairwise_sum(kl_terms);
    mass.swap(next);
  }
  return expectation(mass, f) + running_kl;
}

NodeFunction tilt_kernels(const NodeFunction& drift, const TreePathMeasure& tree, TiltKind kind) {
  const std::size_t n = tree.n_steps();
  const std::size_t d = tree.dim();
  const std::size_t b = tree.branching();
  if (drift.levels() < n || drift.width() != d) throw InvalidInput("drift does not match the tree");
  const double h = tree.grid().sqrt_dt();
  NodeFunction kernels(tree, n - 1, b);
  std::vector<double> up(d);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j) {
      for (std::size_t i = 0; i < d; ++i) {
        const double a = drift.at(k, j, i);
        up[i] = kind == TiltKind::exponential ? 1.0 / (1.0 + std::exp(-2.0 * a * h)) : 0.5 * (1.0 + a * h);
        if (!(up[i] > 0.0 && up[i] < 1.0))
          throw InvalidInput(fmt::format("tilt at level {} node {} coordinate {} gives probability {} outside (0, 1)",
                                         k, j, i, up[i]));
      }
      for (std::size_t c = 0; c < b; ++c) {
        double q = 1.0;
        for (std::size_t i = 0; i < d; ++i) q *= ((c >> i) & 1U) ? up[i] : 1.0 - up[i];
        kernels.at(k, j, c) = q;
      }
    }
  }
  return kernels;
}

std::vector<double> pushforward_measure(const NodeFunction& drift, const TreePathMeasure& tree, TiltKind kind) {
  return kernel_path_measure(tilt_kernels(drift, tree, kind), tree);
}

NodeFunction drift_from_shift(const CameronMartinShift& shift, const TreePathMeasure& tree) {
  if (!(shift.grid() == tree.grid()) || shift.dim() != tree.dim()) throw InvalidInput("shift does not match the tree");
  NodeFunction drift(tree, tree.n_steps() - 1, tree.dim());
  for (std::size_t k = 0; k < tree.n_steps(); ++k)
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j)
      for (std::size_t i = 0; i < tree.dim(); ++i)
        drift.at(k, j, i) = shift.rate(k)(static_cast<Eigen::Index>(i));
  return drift;
}

std::vector<double> pushforward_measure(const CameronMartinShift& shift, const TreePathMeasure& tree, TiltKind kind) {
  return pushforward_measure(drift_from_shift(shift, tree), tree, kind);
}

double tilt_kinetic_energy(const NodeFunction& drift, std::span<const double> q, const TreePathMeasure& tree) {
  require_size(q, tree);
  const auto mass = node_masses(q, tree);
  const double dt = tree.grid().dt();
  double total = 0.0;
  std::vector<double> terms;
  for (std::size_t k = 0; k < tree.n_steps(); ++k) {
    terms.assign(tree.nodes_at(k), 0.0);
    for (std::size_t j = 0; j < terms.size(); ++j) {
      double sq = 0.0;
      for (std::size_t i = 0; i < tree.dim(); ++i) sq += drift.at(k, j, i) * drift.at(k, j, i);
      terms[j] = mass[k][j] * sq;
    }
    total += pairwise_sum(terms) * dt;
  }
  return 0.5 * total;
}

NodeFunction doob_martingale(std::span<const double> L, const TreePathMeasure& tree) {
  require_size(L, tree);
  require_finite(L);
  const double mean = pairwise_sum(L) * tree.path_probability();
  if (std::abs(mean - 1.0) > 1e-12)
    throw InvalidInput(fmt::format("density must have mean 1 on the tree, got {:.17g}", mean));
  const std::size_t n = tree.n_steps();
  const std::size_t b = tree.branching();
  NodeFunction M(tree, n);
  std::copy(L.begin(), L.end(), M.level(n).begin());
  for (std::size_t k = n; k-- > 0;) {
    const auto next = M.level(k + 1);
    auto here = M.level(k);
    for (std::size_t j = 0; j < here.size(); ++j)
      here[j] = pairwise_sum(next.subspan(j * b, b)) / static_cast<double>(b);
  }
  return M;
}

MartingaleRepresentation martingale_representation(const NodeFunction& M, const TreePathMeasure& tree) {
  const std::size_t n = tree.n_steps();
  const std::size_t d = tree.dim();
  const std::size_t b = tree.branching();
  if (M.levels() != n + 1 || M.width() != 1) throw InvalidInput("martingale does not match the tree");
  for (std::size_t k = 0; k <= n; ++k)
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j)
      if (!(M.at(k, j) > 0.0))
        throw InvalidInput(fmt::format("martingale is not strictly positive at level {} node {}", k, j));
  const double h = tree.grid().sqrt_dt();
  MartingaleRepresentation out;
  out.alpha = NodeFunction(tree, n - 1, d);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j) {
      const double m = M.at(k, j);
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < b; ++c) {
          const double diff = M.at(k + 1, j * b + c) - m;
          acc += ((c >> i) & 1U) ? diff : -diff;
        }
        out.alpha.at(k, j, i) = acc / (static_cast<double>(b) * m * h);
      }
      for (std::size_t c = 0; c < b; ++c) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += out.alpha.at(k, j, i) * tree.increment(c, i);
        out.max_residual = std::max(out.max_residual, std::abs(M.at(k + 1, j * b + c) - m * (1.0 + dot)));
      }
    }
  }
  if (d == 1) out.max_residual = 0.0;  // two children, two unknowns: solved exactly
  return out;
}

NodeFunction reconstruct_martingale(const NodeFunction& alpha, const TreePathMeasure& tree, double m0) {
  const std::size_t n = tree.n_steps();
  const std::size_t d = tree.dim();
  const std::size_t b = tree.branching();
  if (alpha.levels() < n || alpha.width() != d) throw InvalidInput("alpha does not match the tree");
  NodeFunction M(tree, n);
  M.at(0, 0) = m0;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < tree.nodes_at(k); ++j)
      for (std::size_t c = 0; c < b; ++c) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += alpha.at(k, j, i) * tree.increment(c, i);
        M.at(k + 1, j * b + c) = M.at(k, j) * (1.0 + dot);
      }
  return M;
}

double representation_energy(const NodeFunction& alpha, const TreePathMeasure& tree) {
  const double dt = tree.grid().dt();
  double total = 0.0;
  std::vector<double> terms;
  for (std::size_t k = 0; k < tree.n_steps(); ++k) {
    terms.assign(tree.nodes_at(k), 0.0);
    for (std::size_t j = 0; j < terms.size(); ++j)
      for (std::size_t i = 0; i < tree.dim(); ++i) terms[j] += alpha.at(k, j, i) * alpha.at(k, j, i);
    total += pairwise_sum(terms) / static_cast<double>(tree.nodes_at(k)) * dt;
  }
  return total;
}

}  // namespace diffvar
