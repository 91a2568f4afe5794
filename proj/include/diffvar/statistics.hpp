#pragma once

#include <cstddef>
#include <span>

namespace diffvar {

/// Monte Carlo point estimate with its standard error.
struct EstimateWithError {
  double value = 0.0;
  double std_error = 0.0;  // sample standard deviation / sqrt(n_samples)
  std::size_t n_samples = 0;
};

/// Pairwise (cascade) summation; the association order depends only on the
/// length of the input, so equal inputs give bit-identical sums.
double pairwise_sum(std::span<const double> values);

/// Mean and standard error by two pairwise passes.
EstimateWithError estimate_mean(std::span<const double> samples);

/// sqrt(a.std_error^2 + b.std_error^2)
double combined_std_error(const EstimateWithError& a, const EstimateWithError& b);

}  // namespace diffvar
