#include <doctest.h>

#include <cmath>

#include "oracle_values.hpp"
#include "test_util.hpp"
#include "udaseg/deformation.hpp"
#include "udaseg/errors.hpp"

using namespace udaseg;
using testutil::interior;
using testutil::kF64;

namespace {

torch::Tensor constant_field(double x, double y, int64_t h, int64_t w) {
  auto v = torch::empty({1, 2, h, w}, kF64);
  v.select(1, 0).fill_(x);
  v.select(1, 1).fill_(y);
  return v;
}

torch::Tensor smooth_image(int64_t h, int64_t w) {
  auto g = identity_grid(h, w, kF64);
  return (torch::sin(0.05 * g.select(1, 0)) + torch::cos(0.04 * g.select(1, 1))).unsqueeze(1);
}

}  // namespace

TEST_SUITE("deformation") {

TEST_CASE("interpolation names") {
  CHECK(parse_interp("bilinear") == Interp::kBilinear);
  CHECK(parse_interp("nearest") == Interp::kNearest);
  CHECK_THROWS_AS(parse_interp("cubic"), ConfigError);
}

TEST_CASE("identity and integer translations") {
  auto img = torch::rand({1, 3, 9, 9}, kF64);
  CHECK(torch::allclose(warp(img, torch::zeros({1, 2, 9, 9}, kF64)), img, 0, 1e-12));
  auto delta = torch::zeros({1, 1, 9, 9}, kF64);
  delta[0][0][4][5] = 1.0;
  // Sampling at x + 1 pulls the delta one pixel to the left.
  auto moved = warp(delta, constant_field(1, 0, 9, 9));
  CHECK(moved[0][0][4][4].item<double>() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(moved.sum().item<double>() == doctest::Approx(1.0).epsilon(1e-12));
  auto flat = torch::full({1, 1, 9, 9}, 0.3, kF64);
  CHECK(torch::allclose(warp(flat, testutil::random_smooth_field(1, 9, 9, 4.0)), flat, 0, 1e-12));
  auto near = warp(delta, constant_field(0.4, 0, 9, 9), Interp::kNearest);
  CHECK(torch::equal(near, delta));
}

TEST_CASE("warp preserves probability maps and is linear") {
  auto logits = torch::randn({2, 4, 16, 16}, kF64);
  auto probs = torch::softmax(logits, 1);
  auto u = torch::cat({testutil::random_smooth_field(2, 16, 16, 5.0), testutil::random_smooth_field(3, 16, 16, 5.0)});
  auto w = warp(probs, u);
  CHECK((w.sum(1) - 1).abs().max().item<double>() < 1e-5);
  auto a = torch::rand({2, 1, 16, 16}, kF64);
  auto b = torch::rand({2, 1, 16, 16}, kF64);
  CHECK(torch::allclose(warp(2 * a - b, u), 2 * warp(a, u) - warp(b, u), 1e-12, 1e-12));
}

TEST_CASE("exponentiate: zero, constant and linear fields") {
  CHECK(exponentiate(torch::zeros({1, 2, 8, 8}, kF64)).displacement.abs().max().item<double>() == 0.0);
  auto t = exponentiate(constant_field(3, -2, 32, 32));
  auto in = interior(t.displacement, 8);
  CHECK((in.select(1, 0) - 3).abs().max().item<double>() < 1e-9);
  CHECK((in.select(1, 1) + 2).abs().max().item<double>() < 1e-9);
  auto inv = invert(constant_field(3, -2, 32, 32));
  CHECK((interior(inv.displacement, 8).select(1, 0) + 3).abs().max().item<double>() < 1e-9);

  // v(x) = A (x - c), A = [[0, 0.1], [-0.1, 0]]: phi(x) - c = expm(A) (x - c).
  const int64_t n = 64;
  const double c = (n - 1) / 2.0;
  auto g = identity_grid(n, n, kF64);
  auto rx = g.select(1, 0) - c;
  auto ry = g.select(1, 1) - c;
  auto v = torch::stack({0.1 * ry, -0.1 * rx}, 1);
  auto phi = exponentiate(v).displacement;
  auto ex = (oracle::kExpm00 - 1) * rx + oracle::kExpm01 * ry;
  auto ey = oracle::kExpm10 * rx + (oracle::kExpm11 - 1) * ry;
  auto inside = (rx.square() + ry.square()) <= 20.0 * 20.0;
  auto err = torch::sqrt((phi.select(1, 0) - ex).square() + (phi.select(1, 1) - ey).square());
  CHECK(err.masked_select(inside).max().item<double>() < 0.05);
}

TEST_CASE("compose") {
  auto d = Deformation{testutil::random_smooth_field(4, 32, 32, 3.0)};
  auto id = Deformation{torch::zeros({1, 2, 32, 32}, kF64)};
  CHECK(torch::allclose(compose(id, d).displacement, d.displacement, 0, 1e-12));
  auto t = compose(Deformation{constant_field(1, 2, 16, 16)}, Deformation{constant_field(-3, 0.5, 16, 16)});
  auto in = interior(t.displacement, 4);
  CHECK((in.select(1, 0) + 2).abs().max().item<double>() < 1e-12);
  CHECK((in.select(1, 1) - 2.5).abs().max().item<double>() < 1e-12);
  CHECK_THROWS_AS(compose(id, Deformation{torch::zeros({1, 2, 16, 16}, kF64)}), DimensionError);

  auto img = smooth_image(64, 64);
  auto inner = Deformation{testutil::random_smooth_field(5, 64, 64, 4.0)};
  auto outer = Deformation{testutil::random_smooth_field(6, 64, 64, 4.0)};
  auto two = warp(warp(img, inner.displacement), outer.displacement);
  auto one = warp(img, compose(outer, inner).displacement);
  CHECK((interior(two, 10) - interior(one, 10)).abs().max().item<double>() < 1e-3);
}

TEST_CASE("inverse and diffeomorphism properties") {
  for (uint64_t seed = 10; seed < 20; ++seed) {
    auto v = testutil::random_smooth_field(seed, 64, 64, 8.0);
    auto f = exponentiate(v);
    auto b = invert(v);
    auto r = compose(f, b).displacement;
    CHECK(interior(r, 10).square().sum(1).sqrt().max().item<double>() < 0.5);
    auto det = interior(jacobian_determinant(f.displacement), 10);
    CHECK((det > 0).to(torch::kFloat64).mean().item<double>() >= 0.999);
  }
}

TEST_CASE("upsampling") {
  auto up = upsample_deformation(Deformation{torch::zeros({1, 2, 16, 16}, kF64)}, 64, 64);
  CHECK(up.height() == 64);
  CHECK(up.displacement.abs().max().item<double>() == 0.0);
  auto c = upsample_deformation(Deformation{constant_field(1, 1, 32, 32)}, 64, 64);
  CHECK((c.displacement - 2).abs().max().item<double>() < 1e-12);
  CHECK_THROWS_AS(upsample_deformation(c, 32, 32), UnsupportedError);

  // A smooth analytic field sampled at 16x16 and upsampled should agree with
  // the same field sampled directly at 64x64 (both in their own pixel units).
  auto field = [](int64_t n) {
    auto g = identity_grid(n, n, kF64);
    auto s = (g + 0.5) / static_cast<double>(n);  // unit-square coordinates
    auto ux = 0.05 * torch::sin(3.0 * s.select(1, 1)) * n;
    auto uy = 0.04 * torch::cos(2.0 * s.select(1, 0) + 1.0) * n;
    return torch::stack({ux, uy}, 1);
  };
  auto hi = field(64);
  auto lo = upsample_deformation(Deformation{field(16)}, 64, 64).displacement;
  CHECK(torch::sqrt(interior(hi - lo, 4).square().mean()).item<double>() < 0.1);
}

TEST_CASE("velocity KL") {
  const int64_t h = 3, w = 4;
  auto mu = torch::empty({1, 2, h, w}, kF64);
  auto var = torch::empty({1, 2, h, w}, kF64);
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        mu[0][c][y][x] = std::sin(1 + c + 0.7 * y + 0.3 * x);
        var[0][c][y][x] = 0.1 + 0.05 * (c + y + x);
      }
  CHECK(std::abs(velocity_kl({mu, var, 0}, 10.0, 0.01).item<double>() - oracle::kVelocityKlDense) < 1e-8);
  CHECK_THROWS_AS(velocity_kl({mu, var, 0}, 0.0, 0.01), ConfigError);

  // Constant mean: only the magnitude term sees it.
  auto cm = torch::full({1, 2, h, w}, 0.5, kF64);
  auto ones = torch::ones({1, 2, h, w}, kF64);
  auto diag = velocity_prior_diagonal(h, w, 10.0, 0.01, kF64);
  const double expected = 0.5 * (0.01 * 0.25 * 2 * h * w + 2 * diag.sum().item<double>());
  CHECK(velocity_kl({cm, ones, 0}, 10.0, 0.01).item<double>() == doctest::Approx(expected).epsilon(1e-12));

  // Stationary point: mu = 0 and var = 1 / diag(P) give zero gradient.
  auto m0 = torch::zeros({1, 2, h, w}, kF64).requires_grad_(true);
  auto v0 = (1.0 / diag).expand({1, 2, h, w}).clone().requires_grad_(true);
  velocity_kl({m0, v0, 0}, 10.0, 0.01).sum().backward();
  CHECK(m0.grad().abs().max().item<double>() == 0.0);
  CHECK(v0.grad().abs().max().item<double>() < 1e-12);

  auto fm = [&](const torch::Tensor& m) { return velocity_kl({m, var, 0}, 10.0, 0.01).sum(); };
  auto fv = [&](const torch::Tensor& v) { return velocity_kl({mu, v, 0}, 10.0, 0.01).sum(); };
  CHECK(testutil::gradcheck(fm, mu) < 1e-4);
  CHECK(testutil::gradcheck(fv, var) < 1e-4);
}

TEST_CASE("deformation stack") {
  auto zero = [](int64_t n) { return VelocityField{torch::zeros({1, 2, n, n}, kF64), torch::ones({1, 2, n, n}, kF64), 0}; };
  DeformationStack stack;
  stack.velocities = {zero(8), zero(32)};
  stack.samples = {stack.velocities[0].mean, stack.velocities[1].mean};
  compose_stack(stack, 32, 32);
  CHECK(stack.forward.displacement.abs().max().item<double>() == 0.0);
  CHECK(stack.inverse.direction == Direction::kInverse);

  DeformationStack s2;
  s2.samples = {testutil::random_smooth_field(30, 16, 16, 2.0), testutil::random_smooth_field(31, 32, 32, 3.0),
                testutil::random_smooth_field(32, 64, 64, 3.0)};
  for (auto& v : s2.samples) s2.velocities.push_back({v, torch::ones_like(v), 0});
  compose_stack(s2, 64, 64);
  auto r = compose(s2.forward, s2.inverse).displacement;
  CHECK(interior(r, 12).square().sum(1).sqrt().max().item<double>() < 1.0);
  // A single velocity: the stack is its exponential.
  DeformationStack s3;
  s3.samples = {s2.samples[2]};
  s3.velocities = {s2.velocities[2]};
  compose_stack(s3, 64, 64);
  CHECK(torch::allclose(s3.forward.displacement, exponentiate(s2.samples[2]).displacement, 0, 1e-12));
  auto partial = partial_forward(s2.samples, 1, 64, 64);
  CHECK(torch::allclose(partial.displacement,
                        upsample_deformation(exponentiate(s2.samples[0]), 64, 64).displacement, 0, 1e-12));
}

}
