#include "udaseg/simplex.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include <torch/torch.h>

#include "udaseg/errors.hpp"

namespace udaseg {
namespace {

// Entries below this are treated as exact zeros when detecting antipodal pairs.
constexpr double kZeroMass = 1e-12;

void require_same_length(const CompositionWeights& a, const CompositionWeights& b) {
  if (a.size() != b.size()) {
    std::ostringstream os;
    os << "composition weights length mismatch: " << a.size() << " vs " << b.size();
    throw DimensionError(os.str());
  }
}

}  // namespace

CompositionWeights::CompositionWeights(std::vector<double> w) : w_(std::move(w)) {
  if (w_.size() < 2) throw DomainError("composition weights need at least 2 entries");
  double sum = 0.0;
  for (double v : w_) {
    if (!std::isfinite(v)) throw DomainError("composition weights contain a non-finite entry");
    if (v < -kSumTolerance) throw DomainError("composition weights contain a negative entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kSumTolerance) {
    std::ostringstream os;
    os << "composition weights sum to " << sum << ", expected 1";
    throw DomainError(os.str());
  }
  for (double& v : w_) v = std::max(v, 0.0);
}

CompositionWeights CompositionWeights::uniform(std::size_t m) {
  return CompositionWeights(std::vector<double>(m, 1.0 / static_cast<double>(m)));
}

CompositionWeights CompositionWeights::one_hot(std::size_t m, std::size_t k) {
  if (k >= m) throw DomainError("one-hot index out of range");
  std::vector<double> w(m, 0.0);
  w[k] = 1.0;
  return CompositionWeights(std::move(w));
}

double bhattacharyya(const CompositionWeights& a, const CompositionWeights& b) {
  require_same_length(a, b);
  double bc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) bc += std::sqrt(a[i] * b[i]);
  return std::clamp(bc, -1.0, 1.0);
}

double fisher_rao_distance(const CompositionWeights& a, const CompositionWeights& b) {
  return 2.0 * std::acos(bhattacharyya(a, b));
}

double fr_similarity(const CompositionWeights& a, const CompositionWeights& b) {
  return 1.0 - fisher_rao_distance(a, b) / std::numbers::pi;
}

CompositionWeights geodesic_interpolate(const CompositionWeights& a, const CompositionWeights& b,
                                        double alpha) {
  require_same_length(a, b);
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("interpolation fraction outside [0, 1]");

  double overlap = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ai = a[i] < kZeroMass ? 0.0 : a[i];
    const double bi = b[i] < kZeroMass ? 0.0 : b[i];
    overlap += std::sqrt(ai * bi);
  }
  // Half-angle between sqrt(a) and sqrt(b); at most pi/2 on the simplex, so
  // the degenerate sin(theta) = 0 case only arises for theta = 0.
  const double theta = std::acos(std::clamp(overlap, -1.0, 1.0));
  if (theta >= std::numbers::pi) {
    throw GeodesicUndefinedError("geodesic undefined between antipodal composition weights");
  }
  if (theta == 0.0 || alpha == 0.0) return a;
  if (alpha == 1.0) return b;

  const double s = std::sin(theta);
  const double ca = std::sin((1.0 - alpha) * theta) / s;
  const double cb = std::sin(alpha * theta) / s;
  std::vector<double> out(a.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double r = ca * std::sqrt(a[i]) + cb * std::sqrt(b[i]);
    out[i] = r * r;
    sum += out[i];
  }
  // Removes round-off only; the squared great-circle point is already unit-sum.
  for (double& v : out) v /= sum;
  return CompositionWeights(std::move(out));
}

std::vector<CompositionWeights> geodesic_path(const CompositionWeights& a,
                                              const CompositionWeights& b, int n) {
  if (n < 2) throw DomainError("geodesic path needs at least 2 points");
  std::vector<CompositionWeights> path;
  path.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    path.push_back(geodesic_interpolate(a, b, static_cast<double>(k) / (n - 1)));
  }
  return path;
}

namespace batched {

torch::Tensor fisher_rao_distance(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw DimensionError("fisher_rao_distance: shape mismatch");
  const double eps = a.scalar_type() == torch::kFloat64 ? 1e-12 : 1e-7;
  auto bc = (a.clamp_min(1e-30).sqrt() * b.clamp_min(1e-30).sqrt()).sum(-1);
  // Exact value, gradient taken from the clamped branch.
  auto exact = torch::acos(bc.detach().clamp(-1.0, 1.0));
  auto smooth = torch::acos(bc.clamp(-1.0 + eps, 1.0 - eps));
  return 2.0 * (exact + (smooth - smooth.detach()));
}

torch::Tensor fr_similarity(const torch::Tensor& a, const torch::Tensor& b) {
  return 1.0 - fisher_rao_distance(a, b) / std::numbers::pi;
}

}  // namespace batched
}  // namespace udaseg
