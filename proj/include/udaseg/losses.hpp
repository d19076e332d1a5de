#pragma once

#include <array>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "udaseg/latent.hpp"
#include "udaseg/networks.hpp"

namespace udaseg {

/// Term weights lambda_1..lambda_5 and the usage threshold tau.
struct LossWeights {
  double seg = 1.0;       // lambda_1
  double recon = 15.0;    // lambda_2
  double vel = 65.0;      // lambda_3
  double tem = 0.5;       // lambda_4
  double structure = 1.0; // lambda_5
  double tau = 0.05;
  bool usage_enabled = true;  // false drops the usage hinge (ablation)

  static LossWeights from_list(const std::array<double, 5>& lambdas, double tau = 0.05);
  std::array<double, 5> as_list() const { return {seg, recon, vel, tem, structure}; }
  /// Throws ConfigError when any weight is negative or tau is outside (0, 1/M].
  void validate(int64_t num_bases) const;
};

/// Prior-precision constants for the velocity KL.
struct VelocityPrior {
  double smooth = 10.0;
  double magnitude = 0.01;
};

/// Per-sample Laplacian negative log-likelihood averaged over pixels: [B].
torch::Tensor recon_nll(const torch::Tensor& x, const torch::Tensor& loc, const torch::Tensor& scale);

/// Per-sample cross-entropy plus (1 - mean foreground soft Dice): [B].
/// `labels` is [B, H, W] integer in 0..K.
torch::Tensor seg_loss(const torch::Tensor& probs, const torch::Tensor& labels);

/// sum_m max(0, tau - mean_i w_m(x_i)).
torch::Tensor usage_loss(const torch::Tensor& weights, double tau);

/// Mean foreground soft Dice between two soft label maps [K+1, H, W].
torch::Tensor label_similarity(const torch::Tensor& a, const torch::Tensor& b);

/// sum_{i<j} [Dice(y_i o phi_i, y_j o phi_j) - C(w_i, w_j)]^2 over a batch of
/// warped one-hot labels [B, K+1, H, W] and weights [B, M]. Returns 0 (with a
/// logged warning) for fewer than two samples.
torch::Tensor struct_loss(const torch::Tensor& warped_labels, const torch::Tensor& weights);

/// One-hot encoding [B, K+1, H, W] of integer labels [B, H, W]; throws
/// DataError for labels outside 0..K.
torch::Tensor one_hot_labels(const torch::Tensor& labels, int64_t num_classes_with_bg,
                             torch::ScalarType dtype = torch::kFloat32);

/// Velocity KL summed over scales, divided by the image pixel count: [B].
torch::Tensor velocity_term(const DeformationStack& stack, const VelocityPrior& prior);

/// Per-sample ELBO terms (as losses, i.e. negated log-likelihoods).
struct ElboTerms {
  torch::Tensor recon;  // [B]
  torch::Tensor seg;    // [B] (undefined for unlabeled samples)
  torch::Tensor vel;    // [B]
};

ElboTerms elbo_terms(const torch::Tensor& x, const ForwardProducts& fwd,
                     const torch::Tensor* labels, const VelocityPrior& prior);

/// lambda_1 L_seg + lambda_2 L_recon - lambda_3 L_vel, with L_seg and L_recon
/// the log-likelihood terms: [B].
torch::Tensor elbo_source(const ElboTerms& t, const LossWeights& w);
torch::Tensor elbo_target(const ElboTerms& t, const LossWeights& w);

struct LossReport {
  double recon_s = 0, recon_t = 0, seg = 0, vel_s = 0, vel_t = 0;
  double lb_s = 0, lb_t = 0;  // mean ELBO per batch
  double tem = 0, usage_s = 0, usage_t = 0, structure = 0;
  double total = 0;
  torch::Tensor objective;  // differentiable total

  static const std::vector<std::string>& column_names();
  std::vector<double> values() const;
};

/// Forward products plus the raw inputs one stage objective needs.
struct SourceBatch {
  const torch::Tensor& x;
  const torch::Tensor& labels;
  const ForwardProducts& fwd;
};
struct TargetBatch {
  const torch::Tensor& x;
  const ForwardProducts& fwd;
};

/// -1/2 [LB(Bs) + LB(Bt)] + l4 tem + l5 struct(Bs) + 1/2 [usage(Bs) + usage(Bt)].
LossReport stage_loss_sa(const SourceBatch& s, const TargetBatch& t, const BasisBankImpl& bank,
                         const LossWeights& w, const VelocityPrior& prior = {});
/// -LB(Bs) + l4 tem + l5 struct(Bs) + usage(Bs).
LossReport stage_loss_sf1(const SourceBatch& s, const BasisBankImpl& bank, const LossWeights& w,
                          const VelocityPrior& prior = {});
/// -LB(Bt) + usage(Bt).
LossReport stage_loss_sf2(const TargetBatch& t, const LossWeights& w, const VelocityPrior& prior = {});

/// Template-KL and struct are computed once per report; these helpers expose
/// them for checks outside the stage objectives.
torch::Tensor template_term(const BasisBankImpl& bank);
torch::Tensor struct_term(const SourceBatch& s, int64_t num_classes_with_bg);

}  // namespace udaseg
