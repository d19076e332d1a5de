#include "udaseg/deformation.hpp"

#include <string>

#include "udaseg/errors.hpp"

namespace F = torch::nn::functional;

namespace udaseg {

Interp parse_interp(std::string_view name) {
  if (name == "bilinear") return Interp::kBilinear;
  if (name == "nearest") return Interp::kNearest;
  throw ConfigError("unknown interpolation mode '" + std::string(name) + "'");
}

torch::Tensor identity_grid(int64_t height, int64_t width, const torch::TensorOptions& options) {
  auto ys = torch::arange(height, options);
  auto xs = torch::arange(width, options);
  auto mesh = torch::meshgrid({ys, xs}, "ij");
  return torch::stack({mesh[1], mesh[0]}, 0).unsqueeze(0);
}

torch::Tensor warp(const torch::Tensor& image, const torch::Tensor& displacement, Interp interp) {
  if (image.dim() != 4 || displacement.dim() != 4 || displacement.size(1) != 2) {
    throw DimensionError("warp expects [B, C, H, W] image and [B, 2, H, W] displacement");
  }
  const auto h = image.size(2);
  const auto w = image.size(3);
  if (displacement.size(2) != h || displacement.size(3) != w) {
    throw DimensionError("warp: image and displacement resolutions differ");
  }
  if (displacement.size(0) != image.size(0) && displacement.size(0) != 1 && image.size(0) != 1) {
    throw DimensionError("warp: batch sizes differ");
  }
  auto disp = displacement.to(image.dtype());
  auto coords = identity_grid(h, w, disp.options()) + disp;
  // Pixel centre i sits at normalized coordinate (2i + 1) / n - 1.
  auto gx = (2.0 * coords.select(1, 0) + 1.0) / static_cast<double>(w) - 1.0;
  auto gy = (2.0 * coords.select(1, 1) + 1.0) / static_cast<double>(h) - 1.0;
  auto grid = torch::stack({gx, gy}, -1);
  auto src = image;
  if (grid.size(0) != src.size(0)) {
    const auto b = std::max(grid.size(0), src.size(0));
    grid = grid.expand({b, h, w, 2});
    src = src.expand({b, src.size(1), h, w});
  }
  auto opts = F::GridSampleFuncOptions().padding_mode(torch::kBorder).align_corners(false);
  if (interp == Interp::kBilinear) {
    opts.mode(torch::kBilinear);
  } else {
    opts.mode(torch::kNearest);
  }
  return F::grid_sample(src, grid, opts);
}

Deformation compose(const Deformation& outer, const Deformation& inner) {
  if (outer.displacement.sizes() != inner.displacement.sizes()) {
    throw DimensionError("compose: deformation resolutions differ; upsample first");
  }
  return {outer.displacement + warp(inner.displacement, outer.displacement), outer.direction};
}

Deformation exponentiate(const torch::Tensor& velocity, int steps) {
  if (steps < 1) throw ConfigError("scaling and squaring needs steps >= 1");
  if (!torch::isfinite(velocity).all().item<bool>()) {
    throw NumericError("velocity field contains non-finite values");
  }
  auto u = velocity / static_cast<double>(int64_t{1} << steps);
  for (int i = 0; i < steps; ++i) u = u + warp(u, u);
  return {u, Direction::kForward};
}

Deformation invert(const torch::Tensor& velocity, int steps) {
  auto d = exponentiate(-velocity, steps);
  d.direction = Direction::kInverse;
  return d;
}

Deformation upsample_deformation(const Deformation& d, int64_t height, int64_t width) {
  const auto h = d.height();
  const auto w = d.width();
  if (height < h || width < w) throw UnsupportedError("deformation downsampling is not supported");
  if (height == h && width == w) return d;
  auto up = F::interpolate(d.displacement, F::InterpolateFuncOptions()
                                               .size(std::vector<int64_t>{height, width})
                                               .mode(torch::kBilinear)
                                               .align_corners(false));
  const double sx = static_cast<double>(width) / static_cast<double>(w);
  const double sy = static_cast<double>(height) / static_cast<double>(h);
  auto scale = torch::tensor({sx, sy}, up.options()).view({1, 2, 1, 1});
  return {up * scale, d.direction};
}

torch::Tensor velocity_prior_diagonal(int64_t height, int64_t width, double lambda_smooth,
                                      double lambda_mag, const torch::TensorOptions& options) {
  auto degree = torch::full({height, width}, 4.0, options);
  if (height > 0) {
    degree.select(0, 0).sub_(1.0);
    degree.select(0, height - 1).sub_(1.0);
  }
  if (width > 0) {
    degree.select(1, 0).sub_(1.0);
    degree.select(1, width - 1).sub_(1.0);
  }
  return lambda_mag + lambda_smooth * degree;
}

torch::Tensor velocity_kl(const VelocityField& v, double lambda_smooth, double lambda_mag) {
  if (lambda_smooth <= 0.0 || lambda_mag <= 0.0) {
    throw ConfigError("velocity prior weights must be > 0");
  }
  const auto& mu = v.mean;
  const auto& var = v.variance;
  if (mu.dim() != 4 || mu.sizes() != var.sizes()) {
    throw DimensionError("velocity_kl expects matching [B, 2, H, W] mean and variance");
  }
  using torch::indexing::Slice;
  auto dx = mu.index({Slice(), Slice(), Slice(), Slice(1, torch::indexing::None)}) -
            mu.index({Slice(), Slice(), Slice(), Slice(torch::indexing::None, -1)});
  auto dy = mu.index({Slice(), Slice(), Slice(1, torch::indexing::None), Slice()}) -
            mu.index({Slice(), Slice(), Slice(torch::indexing::None, -1), Slice()});
  auto edges = dx.square().flatten(1).sum(1) + dy.square().flatten(1).sum(1);
  auto magnitude = mu.square().flatten(1).sum(1);
  auto diag = velocity_prior_diagonal(mu.size(2), mu.size(3), lambda_smooth, lambda_mag,
                                      mu.options());
  auto trace = (var * diag).flatten(1).sum(1);
  auto logdet = torch::log(var).flatten(1).sum(1);
  return 0.5 * (lambda_smooth * edges + lambda_mag * magnitude + trace - logdet);
}

torch::Tensor jacobian_determinant(const torch::Tensor& displacement) {
  using torch::indexing::Slice;
  auto ux = displacement.select(1, 0);
  auto uy = displacement.select(1, 1);
  auto central = [](const torch::Tensor& f, int64_t dim) {
    auto fwd = torch::roll(f, -1, dim);
    auto bwd = torch::roll(f, 1, dim);
    auto g = (fwd - bwd) * 0.5;
    // One-sided differences on the borders.
    const auto n = f.size(dim);
    g.narrow(dim, 0, 1).copy_(f.narrow(dim, 1, 1) - f.narrow(dim, 0, 1));
    g.narrow(dim, n - 1, 1).copy_(f.narrow(dim, n - 1, 1) - f.narrow(dim, n - 2, 1));
    return g;
  };
  auto dux_dx = central(ux, 2);
  auto dux_dy = central(ux, 1);
  auto duy_dx = central(uy, 2);
  auto duy_dy = central(uy, 1);
  return (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx;
}

namespace {

std::vector<Deformation> integrate_all(const std::vector<torch::Tensor>& samples,
                                       std::size_t count, int64_t height, int64_t width,
                                       int steps, bool negate) {
  std::vector<Deformation> out;
  out.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    auto d = negate ? invert(samples[j], steps) : exponentiate(samples[j], steps);
    out.push_back(upsample_deformation(d, height, width));
  }
  return out;
}

}  // namespace

Deformation partial_forward(const std::vector<torch::Tensor>& samples, std::size_t count,
                            int64_t height, int64_t width, int steps) {
  if (count == 0 || count > samples.size()) throw DimensionError("partial_forward: bad count");
  auto parts = integrate_all(samples, count, height, width, steps, false);
  // Maps: cur o phi_next corresponds to warping by cur first, then phi_next.
  Deformation cur = parts[0];
  for (std::size_t j = 1; j < parts.size(); ++j) cur = compose(parts[j], cur);
  return cur;
}

void compose_stack(DeformationStack& stack, int64_t height, int64_t width, int steps) {
  const auto n = stack.samples.size();
  if (n == 0) throw DimensionError("compose_stack: no velocities");
  stack.forward = partial_forward(stack.samples, n, height, width, steps);
  auto inv = integrate_all(stack.samples, n, height, width, steps, true);
  Deformation cur = inv[n - 1];
  for (std::size_t j = n - 1; j-- > 0;) cur = compose(inv[j], cur);
  cur.direction = Direction::kInverse;
  stack.inverse = cur;
}

}  // namespace udaseg
