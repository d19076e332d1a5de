#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace udaseg {

// Displacement and velocity maps are [B, 2, H, W] in pixel units of their own
// grid; channel 0 is the x (column) component, channel 1 the y (row)
// component. Sampling follows the pixel-centre convention (align_corners =
// false), so a displacement of +1 samples the neighbouring pixel exactly.

struct VelocityField {
  torch::Tensor mean;      // [B, 2, H, W]
  torch::Tensor variance;  // [B, 2, H, W], > 0
  int64_t level = 0;       // 0-based scale index (0 = coarsest)
};

enum class Direction { kForward, kInverse };

struct Deformation {
  torch::Tensor displacement;  // [B, 2, H, W]
  Direction direction = Direction::kForward;

  int64_t height() const { return displacement.size(2); }
  int64_t width() const { return displacement.size(3); }
};

enum class Interp { kBilinear, kNearest };

Interp parse_interp(std::string_view name);

inline constexpr int kDefaultSquaringSteps = 7;

/// Resamples `image` [B, C, H, W] at x + displacement(x) with border padding.
torch::Tensor warp(const torch::Tensor& image, const torch::Tensor& displacement,
                   Interp interp = Interp::kBilinear);

/// Displacement of the map whose image warp equals warping by `inner` first,
/// then by `outer`: u(x) = u_outer(x) + u_inner(x + u_outer(x)).
Deformation compose(const Deformation& outer, const Deformation& inner);

/// Scaling and squaring: v / 2^steps self-composed `steps` times.
Deformation exponentiate(const torch::Tensor& velocity, int steps = kDefaultSquaringSteps);

/// exp(-v), the inverse of exponentiate(v).
Deformation invert(const torch::Tensor& velocity, int steps = kDefaultSquaringSteps);

/// Bilinear upsampling with displacement values rescaled to target pixels.
/// Throws UnsupportedError when the target is smaller than the source.
Deformation upsample_deformation(const Deformation& d, int64_t height, int64_t width);

/// Per-sample KL[N(mu, diag var) || N(0, P^{-1})] with precision
/// P = mag * I + smooth * Laplacian(4-neighbour grid), constants dropped.
/// Returns a [B] tensor summed over every element of the field.
torch::Tensor velocity_kl(const VelocityField& v, double lambda_smooth, double lambda_mag);

/// Diagonal of the prior precision for a grid, [H, W].
torch::Tensor velocity_prior_diagonal(int64_t height, int64_t width, double lambda_smooth,
                                      double lambda_mag, const torch::TensorOptions& options);

/// det(I + grad u) by central differences, [B, H, W].
torch::Tensor jacobian_determinant(const torch::Tensor& displacement);

/// Identity pixel-coordinate grid [1, 2, H, W] (x then y).
torch::Tensor identity_grid(int64_t height, int64_t width, const torch::TensorOptions& options);

/// Velocities integrated per scale and composed coarse to fine.
struct DeformationStack {
  std::vector<VelocityField> velocities;
  std::vector<torch::Tensor> samples;  // the velocities actually integrated
  Deformation forward;                 // phi = phi^{l_1} o ... o phi^{l_J}
  Deformation inverse;                 // phi^{-1}
};

/// Integrates each velocity sample at its own scale, upsamples to
/// (height, width) and composes: forward in scale order, inverse in reverse
/// order with negated velocities.
void compose_stack(DeformationStack& stack, int64_t height, int64_t width,
                   int steps = kDefaultSquaringSteps);

/// Forward composition phi^{l_1} o ... o phi^{l_k} of the first k velocities,
/// evaluated at (height, width). Used to pre-align finer content features.
Deformation partial_forward(const std::vector<torch::Tensor>& samples, std::size_t count,
                            int64_t height, int64_t width, int steps = kDefaultSquaringSteps);

}  // namespace udaseg
