#pragma once

#include <span>
#include <vector>

#include <torch/types.h>

namespace udaseg {

/// A point on the probability simplex: non-negative entries summing to one.
class CompositionWeights {
 public:
  static constexpr double kSumTolerance = 1e-6;

  /// Validates length >= 2, entries >= 0 and unit sum; throws DomainError otherwise.
  explicit CompositionWeights(std::vector<double> w);

  static CompositionWeights uniform(std::size_t m);
  static CompositionWeights one_hot(std::size_t m, std::size_t k);

  std::size_t size() const { return w_.size(); }
  double operator[](std::size_t i) const { return w_[i]; }
  std::span<const double> values() const { return w_; }
  const std::vector<double>& vector() const { return w_; }

 private:
  std::vector<double> w_;
};

/// Bhattacharyya coefficient sum_m sqrt(a_m * b_m), clamped to [-1, 1].
double bhattacharyya(const CompositionWeights& a, const CompositionWeights& b);

/// Fisher-Rao geodesic distance 2*acos(BC(a, b)), in [0, pi].
double fisher_rao_distance(const CompositionWeights& a, const CompositionWeights& b);

/// 1 - fisher_rao_distance / pi, in [0, 1].
double fr_similarity(const CompositionWeights& a, const CompositionWeights& b);

/// Point at fraction alpha along the great-circle arc between sqrt(a) and
/// sqrt(b) on the positive orthant of the unit sphere, squared back onto the
/// simplex. Disjoint supports are fine (half-angle pi/2); GeodesicUndefinedError
/// is reserved for a half-angle of pi, which simplex inputs cannot reach.
CompositionWeights geodesic_interpolate(const CompositionWeights& a, const CompositionWeights& b,
                                        double alpha);

/// Evenly spaced geodesic path with n >= 2 points, endpoints included.
std::vector<CompositionWeights> geodesic_path(const CompositionWeights& a,
                                              const CompositionWeights& b, int n);

namespace batched {

/// Pairwise Fisher-Rao distance between rows of a and b (same shape [..., M]).
/// Differentiable; the arccos argument is clamped slightly inside [-1, 1] so
/// gradients stay finite at coincident rows.
torch::Tensor fisher_rao_distance(const torch::Tensor& a, const torch::Tensor& b);

torch::Tensor fr_similarity(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace batched

}  // namespace udaseg
