#include <doctest.h>

#include <cmath>
#include <random>

#include "oracle_values.hpp"
#include "test_util.hpp"
#include "udaseg/errors.hpp"
#include "udaseg/latent.hpp"

using namespace udaseg;
using testutil::kF64;

namespace {

/// One-element bases at a single scale with the given means and variances.
BasisBank make_bank(const std::vector<double>& mean, const std::vector<double>& var) {
  const auto m = static_cast<int64_t>(mean.size());
  BasisBank bank(m, std::vector<ScaleShape>{{1, 1, 1}});
  bank->to(torch::kFloat64);
  torch::NoGradGuard guard;
  bank->raw_mean(0).copy_(torch::tensor(mean, kF64).view({m, 1, 1, 1}));
  auto v = torch::tensor(var, kF64).view({m, 1, 1, 1});
  bank->raw_scale(0).copy_(torch::log(torch::expm1(v - kVarianceFloor)));
  return bank;
}

}  // namespace

TEST_SUITE("latent") {

TEST_CASE("positive variance parameterization") {
  auto v = positive_variance(torch::tensor({-50.0, 0.0, 3.0}, kF64));
  CHECK(v[0].item<double>() >= kVarianceFloor);
  CHECK(v[1].item<double>() == doctest::Approx(std::log(2.0) + kVarianceFloor).epsilon(1e-12));
}

TEST_CASE("basis initialization") {
  BasisBank bank(6, std::vector<ScaleShape>{{16, 4, 4}, {16, 8, 8}});
  CHECK(bank->num_levels() == 2);
  CHECK(bank->means(1).sizes() == torch::IntArrayRef({6, 16, 8, 8}));
  CHECK(torch::allclose(bank->variances(0), torch::ones({6, 16, 4, 4}), 1e-5, 1e-5));
  CHECK(bank->means(0).std().item<double>() == doctest::Approx(0.1).epsilon(0.15));
  CHECK_THROWS_AS(BasisBank(1, std::vector<ScaleShape>{{1, 1, 1}}), ConfigError);
}

TEST_CASE("one-hot weights select a basis") {
  auto bank = make_bank({0.3, -1.0, 2.0}, {0.5, 2.0, 1.5});
  auto q = mix_posterior(*bank, CompositionWeights::one_hot(3, 1), 0);
  CHECK(q.mean.item<double>() == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(q.variance.item<double>() == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("equal variances average the means") {
  auto bank = make_bank({1.0, 3.0}, {0.7, 0.7});
  auto q = mix_posterior(*bank, CompositionWeights({0.5, 0.5}), 0);
  CHECK(q.mean.item<double>() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(q.variance.item<double>() == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("mixture matches quadrature reference") {
  auto bank = make_bank({-1.0, 0.5, 2.0, 0.3}, {0.5, 1.2, 2.0, 0.8});
  auto q = mix_posterior(*bank, CompositionWeights({0.1, 0.2, 0.3, 0.4}), 0);
  CHECK(std::abs(q.mean.item<double>() - oracle::kMixtureMean) < 1e-9);
  CHECK(std::abs(q.variance.item<double>() - oracle::kMixtureVariance) < 1e-9);
}

TEST_CASE("fused variance is bracketed and fusion is permutation equivariant") {
  torch::manual_seed(0);
  BasisBank bank(4, std::vector<ScaleShape>{{3, 4, 4}});
  bank->to(torch::kFloat64);
  {
    torch::NoGradGuard g;
    bank->raw_scale(0).copy_(torch::randn({4, 3, 4, 4}, kF64));
  }
  std::mt19937_64 rng(1);
  const auto w = testutil::random_simplex(rng, 4);
  auto q = mix_posterior(*bank, CompositionWeights(w), 0);
  auto var = bank->variances(0);
  CHECK((q.variance <= std::get<0>(var.max(0)) + 1e-12).all().item<bool>());
  CHECK((q.variance >= std::get<0>(var.min(0)) - 1e-12).all().item<bool>());

  auto perm = torch::tensor({2, 0, 3, 1}, torch::kLong);
  auto wt = torch::tensor(w, kF64).unsqueeze(0);
  auto a = fuse_gaussians(bank->means(0), var, wt);
  auto b = fuse_gaussians(bank->means(0).index_select(0, perm), var.index_select(0, perm), wt.index_select(1, perm));
  CHECK(torch::allclose(a.mean, b.mean, 1e-12, 1e-12));
  CHECK(torch::allclose(a.variance, b.variance, 1e-12, 1e-12));
}

TEST_CASE("posterior is Lipschitz in the weights") {
  torch::manual_seed(2);
  BasisBank bank(5, std::vector<ScaleShape>{{2, 3, 3}});
  bank->to(torch::kFloat64);
  std::mt19937_64 rng(9);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    auto w = testutil::random_simplex(rng, 5);
    auto w2 = w;
    w2[0] += 1e-4;
    w2[1] -= 1e-4;
    if (w2[1] < 0) continue;
    auto a = mix_posterior(*bank, CompositionWeights(w), 0);
    auto b = mix_posterior(*bank, CompositionWeights(w2), 0);
    worst = std::max(worst, (a.mean - b.mean).abs().max().item<double>() / 2e-4);
  }
  // Slope stays bounded by the spread of the basis means over their variance ratio.
  CHECK(worst < 50.0);
}

TEST_CASE("prior is the uniform posterior") {
  torch::manual_seed(4);
  BasisBank bank(3, std::vector<ScaleShape>{{2, 4, 4}});
  auto p = mix_prior(*bank, 0);
  auto q = mix_posterior(*bank, CompositionWeights::uniform(3), 0);
  CHECK(torch::equal(p.mean, q.mean));
  CHECK(torch::equal(p.variance, q.variance));
  auto same = make_bank({0.4, 0.4}, {1.3, 1.3});
  CHECK(mix_prior(*same, 0).mean.item<double>() == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("diagonal KL") {
  DiagonalGaussian a{torch::zeros({1}, kF64), torch::ones({1}, kF64)};
  DiagonalGaussian b{torch::ones({1}, kF64), torch::ones({1}, kF64)};
  CHECK(kl_diag_gaussian(a, a).item<double>() == 0.0);
  CHECK(kl_diag_gaussian(a, b).item<double>() == doctest::Approx(0.5).epsilon(1e-14));
  DiagonalGaussian q{torch::tensor({0.3}, kF64), torch::tensor({0.5}, kF64)};
  DiagonalGaussian p{torch::tensor({-0.2}, kF64), torch::tensor({2.0}, kF64)};
  CHECK(std::abs(kl_diag_gaussian(q, p).item<double>() - oracle::kKlQuadrature) < 1e-10);
  DiagonalGaussian bad{torch::zeros({2}, kF64), torch::ones({2}, kF64)};
  CHECK_THROWS_AS(kl_diag_gaussian(a, bad), DimensionError);
}

TEST_CASE("validate rejects bad Gaussians") {
  DiagonalGaussian g{torch::zeros({2}), torch::tensor({1.0f, 0.0f})};
  CHECK_THROWS_AS(g.validate(), NumericError);
  DiagonalGaussian h{torch::zeros({2}), torch::ones({3})};
  CHECK_THROWS_AS(h.validate(), DimensionError);
}

TEST_CASE("surrogate template loss") {
  auto same = make_bank({0.2, 0.2, 0.2}, {0.9, 0.9, 0.9});
  CHECK(surrogate_template_loss(*same).item<double>() == doctest::Approx(0.0).epsilon(1e-12));
  auto two = make_bank({0.0, 2.0}, {1.0, 1.0});
  CHECK(surrogate_template_loss(*two).item<double>() == doctest::Approx(0.5).epsilon(1e-9));
  auto three = make_bank({0.0, 1.0, -0.5}, {1.0, 0.5, 2.0});
  CHECK(std::abs(surrogate_template_loss(*three).item<double>() - oracle::kTemplateKl3) < 1e-9);
}

TEST_CASE("template loss gradient matches finite differences") {
  torch::manual_seed(7);
  BasisBank bank(3, std::vector<ScaleShape>{{2, 2, 2}, {1, 3, 3}});
  bank->to(torch::kFloat64);
  // Evaluate the loss with one raw parameter tensor swapped for the probe.
  auto probe = [&](torch::Tensor& slot) {
    return [&bank, &slot](const torch::Tensor& v) {
      auto old = slot;
      slot = v;
      auto loss = surrogate_template_loss(*bank);
      slot = old;
      return loss;
    };
  };
  for (int level = 0; level < 2; ++level) {
    CHECK(testutil::gradcheck(probe(bank->raw_mean(level)), bank->raw_mean(level).detach()) < 1e-4);
    CHECK(testutil::gradcheck(probe(bank->raw_scale(level)), bank->raw_scale(level).detach()) < 1e-4);
  }
}

TEST_CASE("sampling") {
  DiagonalGaussian g{torch::full({1, 1, 1}, 0.7, kF64), torch::full({1, 1, 1}, 0.09, kF64)};
  auto e = sample_template({g}, SampleMode::kExpectation);
  CHECK(torch::equal(e.z[0], g.mean));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(11);
  DiagonalGaussian big{torch::full({10000}, 0.7, kF64), torch::full({10000}, 0.09, kF64)};
  auto s = sample_template({big}, SampleMode::kSampled, gen).z[0];
  const double n = 10000;
  CHECK(std::abs(s.mean().item<double>() - 0.7) < 3 * std::sqrt(0.09 / n));
  // Standard error of the sample variance for a Gaussian: sigma^2 sqrt(2 / (n - 1)).
  CHECK(std::abs(s.var().item<double>() - 0.09) < 3 * 0.09 * std::sqrt(2 / (n - 1)));
  DiagonalGaussian tiny{torch::full({5}, 0.7, kF64), torch::full({5}, 1e-14, kF64)};
  CHECK(torch::allclose(sample_template({tiny}, SampleMode::kSampled, gen).z[0], tiny.mean, 0, 1e-6));
}

}
