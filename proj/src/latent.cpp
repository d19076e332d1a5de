#include "udaseg/latent.hpp"

#include <cmath>
#include <string>

#include "udaseg/errors.hpp"

namespace udaseg {
namespace {

// Raw scale whose softplus is 1: log(e - 1).

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw NumericError(std::string(what) + " contains non-finite values");
  }
}

}  // namespace

void DiagonalGaussian::validate() const {
  if (!mean.defined() || !variance.defined()) throw DimensionError("gaussian is empty");
  if (mean.sizes() != variance.sizes()) {
    throw DimensionError("gaussian mean and variance shapes differ");
  }
  require_finite(mean, "gaussian mean");
  require_finite(variance, "gaussian variance");
  if (!(variance > 0).all().item<bool>()) throw NumericError("gaussian variance must be > 0");
}

torch::Tensor positive_variance(const torch::Tensor& raw, double floor) {
  return torch::softplus(raw) + floor;
}

BasisBankImpl::BasisBankImpl(int64_t num_bases, std::vector<ScaleShape> shapes, double init_variance)
    : num_bases_(num_bases), shapes_(std::move(shapes)) {
  if (num_bases_ < 2) throw ConfigError("basis bank needs M >= 2");
  if (shapes_.empty()) throw ConfigError("basis bank needs at least one scale");
  if (!(init_variance > kVarianceFloor)) throw ConfigError("basis init variance must exceed the floor");
  const double raw = std::log(std::expm1(init_variance - kVarianceFloor));
  for (std::size_t l = 0; l < shapes_.size(); ++l) {
    const auto& s = shapes_[l];
    const std::vector<int64_t> dims{num_bases_, s.channels, s.height, s.width};
    auto mean = register_parameter("mean" + std::to_string(l), torch::randn(dims) * 0.1);
    auto scale = register_parameter("raw_scale" + std::to_string(l),
                                    torch::full(dims, raw));
    raw_means_.push_back(mean);
    raw_scales_.push_back(scale);
  }
}

torch::Tensor BasisBankImpl::means(int64_t level) const {
  return raw_means_.at(static_cast<std::size_t>(level));
}

torch::Tensor BasisBankImpl::variances(int64_t level) const {
  return positive_variance(raw_scales_.at(static_cast<std::size_t>(level)));
}

DiagonalGaussian BasisBankImpl::basis(int64_t basis, int64_t level) const {
  return {means(level)[basis], variances(level)[basis]};
}

DiagonalGaussian fuse_gaussians(const torch::Tensor& means, const torch::Tensor& variances,
                                const torch::Tensor& weights) {
  if (weights.dim() != 2 || weights.size(1) != means.size(0)) {
    throw DimensionError("fuse_gaussians: weights must be [B, M] matching the basis count");
  }
  const auto m = means.size(0);
  auto precision = variances.reciprocal().reshape({m, -1});
  auto weighted_mean = (precision * means.reshape({m, -1}));
  auto fused_precision = weights.matmul(precision);
  auto fused_variance = fused_precision.reciprocal();
  auto fused_mean = weights.matmul(weighted_mean) * fused_variance;

  std::vector<int64_t> out_shape{weights.size(0)};
  for (int64_t d = 1; d < means.dim(); ++d) out_shape.push_back(means.size(d));
  return {fused_mean.reshape(out_shape), fused_variance.reshape(out_shape)};
}

namespace {

void require_level(const BasisBankImpl& bank, int64_t level) {
  if (level < 0 || level >= bank.num_levels()) throw DimensionError("scale index out of range");
}

}  // namespace

DiagonalGaussian mix_posterior(const BasisBankImpl& bank, const torch::Tensor& weights,
                               int64_t level) {
  require_level(bank, level);
  auto mu = bank.means(level);
  auto var = bank.variances(level);
  return fuse_gaussians(mu, var, weights.to(mu.dtype()));
}

DiagonalGaussian mix_posterior(const BasisBankImpl& bank, const CompositionWeights& w,
                               int64_t level) {
  require_level(bank, level);
  if (static_cast<int64_t>(w.size()) != bank.num_bases()) {
    throw DimensionError("composition weights length differs from basis count");
  }
  auto mu = bank.means(level);
  auto var = bank.variances(level);
  require_finite(mu, "basis means");
  require_finite(var, "basis variances");
  auto wt = torch::tensor(w.vector(), torch::TensorOptions().dtype(torch::kFloat64))
                .to(mu.dtype())
                .unsqueeze(0);
  auto fused = fuse_gaussians(mu, var, wt);
  return {fused.mean[0], fused.variance[0]};
}

DiagonalGaussian mix_prior(const BasisBankImpl& bank, int64_t level) {
  return mix_posterior(bank, CompositionWeights::uniform(static_cast<std::size_t>(bank.num_bases())),
                       level);
}

torch::Tensor kl_diag_gaussian(const DiagonalGaussian& q, const DiagonalGaussian& p,
                               Reduction reduction, bool batched) {
  if (q.mean.sizes() != p.mean.sizes() || q.variance.sizes() != p.variance.sizes() ||
      q.mean.sizes() != q.variance.sizes()) {
    throw DimensionError("kl_diag_gaussian: shape mismatch");
  }
  auto diff = q.mean - p.mean;
  auto elem = 0.5 * (torch::log(p.variance) - torch::log(q.variance) +
                     (q.variance + diff * diff) / p.variance - 1.0);
  if (batched) {
    auto per_sample = elem.flatten(1).sum(1);
    if (reduction == Reduction::kElementMean) per_sample = per_sample / elem[0].numel();
    return per_sample;
  }
  auto total = elem.sum();
  if (reduction == Reduction::kElementMean) total = total / elem.numel();
  return total;
}

torch::Tensor surrogate_template_loss(const BasisBankImpl& bank, Reduction reduction) {
  torch::Tensor total;
  const auto m = bank.num_bases();
  for (int64_t l = 0; l < bank.num_levels(); ++l) {
    auto mu = bank.means(l);
    auto var = bank.variances(l);
    auto uniform = torch::full({1, m}, 1.0 / static_cast<double>(m), mu.options());
    auto prior = fuse_gaussians(mu, var, uniform);
    // Prior broadcast over the M bases: each basis is one batch row.
    DiagonalGaussian prior_b{prior.mean.expand_as(mu), prior.variance.expand_as(var)};
    auto kl = kl_diag_gaussian({mu, var}, prior_b, reduction, /*batched=*/true).mean();
    total = total.defined() ? total + kl : kl;
  }
  return total;
}

AnatomyTemplate sample_template(const std::vector<DiagonalGaussian>& posteriors, SampleMode mode,
                                std::optional<at::Generator> generator) {
  AnatomyTemplate out;
  out.provenance = mode;
  out.z.reserve(posteriors.size());
  for (const auto& p : posteriors) {
    if (mode == SampleMode::kExpectation) {
      out.z.push_back(p.mean);
      continue;
    }
    auto eps = generator ? at::randn(p.mean.sizes(), *generator, p.mean.options())
                         : torch::randn_like(p.mean);
    out.z.push_back(p.mean + torch::sqrt(p.variance) * eps);
  }
  return out;
}

}  // namespace udaseg
