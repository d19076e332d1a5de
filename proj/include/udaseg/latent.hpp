#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "udaseg/simplex.hpp"

namespace udaseg {

/// Elementwise-independent Gaussian over a feature map. Unbatched tensors are
/// [C, H, W]; batched ones carry a leading batch dimension.
struct DiagonalGaussian {
  torch::Tensor mean;
  torch::Tensor variance;

  /// Throws DimensionError on shape mismatch and NumericError on non-finite
  /// entries or non-positive variance.
  void validate() const;
};

struct ScaleShape {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
};

inline constexpr double kVarianceFloor = 1e-6;

/// softplus(raw) + floor; the variance parameterization shared by every
/// Gaussian head in the model.
torch::Tensor positive_variance(const torch::Tensor& raw, double floor = kVarianceFloor);

/// Learnable diagonal-Gaussian bases q_m(z^l), one set of M per scale.
/// Level 0 is the coarsest scale.
class BasisBankImpl : public torch::nn::Module {
 public:
  BasisBankImpl(int64_t num_bases, std::vector<ScaleShape> shapes, double init_variance = 1.0);

  int64_t num_bases() const { return num_bases_; }
  int64_t num_levels() const { return static_cast<int64_t>(shapes_.size()); }
  const ScaleShape& shape(int64_t level) const { return shapes_.at(static_cast<std::size_t>(level)); }

  /// [M, C, H, W] means at one level.
  torch::Tensor means(int64_t level) const;
  /// [M, C, H, W] variances (softplus + floor) at one level.
  torch::Tensor variances(int64_t level) const;

  DiagonalGaussian basis(int64_t basis, int64_t level) const;

  torch::Tensor& raw_mean(int64_t level) { return raw_means_.at(static_cast<std::size_t>(level)); }
  torch::Tensor& raw_scale(int64_t level) { return raw_scales_.at(static_cast<std::size_t>(level)); }

 private:
  int64_t num_bases_;
  std::vector<ScaleShape> shapes_;
  std::vector<torch::Tensor> raw_means_;
  std::vector<torch::Tensor> raw_scales_;
};
TORCH_MODULE(BasisBank);

/// Precision-weighted fusion of M Gaussians: the normalized log-linear
/// mixture prod_m q_m^{w_m}. `means`/`variances` are [M, ...]; `weights` is
/// [B, M]. Returns batched [B, ...] mean and variance.
DiagonalGaussian fuse_gaussians(const torch::Tensor& means, const torch::Tensor& variances,
                                const torch::Tensor& weights);

/// Posterior q(z^l | w) for a single weight vector; unbatched result.
DiagonalGaussian mix_posterior(const BasisBankImpl& bank, const CompositionWeights& w,
                               int64_t level);

/// Batched posterior for [B, M] weights.
DiagonalGaussian mix_posterior(const BasisBankImpl& bank, const torch::Tensor& weights,
                               int64_t level);

/// Prior p(z^l): the uniform-weight mixture of the bases.
DiagonalGaussian mix_prior(const BasisBankImpl& bank, int64_t level);

enum class Reduction { kSum, kElementMean };

/// KL[q || p] for diagonal Gaussians. kSum sums over all elements (batched
/// inputs: over everything after dim 0, returning [B]); kElementMean divides
/// that sum by the per-sample element count.
torch::Tensor kl_diag_gaussian(const DiagonalGaussian& q, const DiagonalGaussian& p,
                               Reduction reduction = Reduction::kSum, bool batched = false);

/// sum_l (1/M) sum_m KL[q_m(z^l) || p(z^l)].
torch::Tensor surrogate_template_loss(const BasisBankImpl& bank,
                                      Reduction reduction = Reduction::kSum);

enum class SampleMode { kSampled, kExpectation };

struct AnatomyTemplate {
  std::vector<torch::Tensor> z;  // one map per level, coarse to fine
  SampleMode provenance = SampleMode::kExpectation;
};

/// Reparameterized draw z = mu + sqrt(var) * eps, or the mean in expectation mode.
AnatomyTemplate sample_template(const std::vector<DiagonalGaussian>& posteriors, SampleMode mode,
                                std::optional<at::Generator> generator = std::nullopt);

}  // namespace udaseg
