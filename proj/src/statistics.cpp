#include "diffvar/statistics.hpp"

#include <cmath>
#include <vector>

#include "diffvar/errors.hpp"

namespace diffvar {

double pairwise_sum(std::span<const double> values) {
  constexpr std::size_t kLeaf = 32;
  if (values.size() <= kLeaf) {
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

EstimateWithError estimate_mean(std::span<const double> samples) {
  if (samples.empty()) throw NumericalFailure("no samples to estimate from");
  const double n = static_cast<double>(samples.size());
  const double mean = pairwise_sum(samples) / n;
  if (samples.size() == 1) return {mean, 0.0, 1};
  std::vector<double> squares(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double centered = samples[i] - mean;
    squares[i] = centered * centered;
  }
  const double variance = pairwise_sum(squares) / (n - 1.0);
  return {mean, std::sqrt(variance / n), samples.size()};
}

double combined_std_error(const EstimateWithError& a, const EstimateWithError& b) {
  return std::hypot(a.std_error, b.std_error);
}

}  // namespace diffvar
