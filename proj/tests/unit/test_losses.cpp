#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "oracle_values.hpp"
#include "test_util.hpp"
#include "udaseg/errors.hpp"
#include "udaseg/losses.hpp"
#include "udaseg/simplex.hpp"

using namespace udaseg;
using testutil::kF64;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_height = 16;
  c.image_width = 16;
  c.num_levels = 3;
  c.velocity_levels = {1, 3};
  c.num_bases = 3;
  c.num_classes = 2;
  c.latent_channels = 2;
  c.base_width = 4;
  c.max_width = 8;
  c.registration_width = 4;
  c.decoder_width = 4;
  return c;
}

double dice_pair(const torch::Tensor& a, const torch::Tensor& b) {
  // Mean over foreground channels, written out per pixel.
  const auto k = a.size(0);
  double total = 0.0;
  for (int64_t c = 1; c < k; ++c) {
    double inter = 0, sa = 0, sb = 0;
    auto pa = a[c].flatten();
    auto pb = b[c].flatten();
    for (int64_t i = 0; i < pa.numel(); ++i) {
      inter += pa[i].item<double>() * pb[i].item<double>();
      sa += pa[i].item<double>();
      sb += pb[i].item<double>();
    }
    total += (2 * inter + 1e-5) / (sa + sb + 1e-5);
  }
  return total / static_cast<double>(k - 1);
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("loss weights") {
  CHECK_NOTHROW(LossWeights::from_list({1, 15, 65, 0.5, 1}).validate(6));
  CHECK_NOTHROW(LossWeights::from_list({20, 15, 25, 1e-4, 10}).validate(6));
  CHECK_NOTHROW(LossWeights::from_list({1, 15, 65, 2, 1}).validate(6));
  CHECK_NOTHROW(LossWeights::from_list({0, 15, 65, 0, 0}).validate(6));
  CHECK_THROWS_AS(LossWeights::from_list({1, -1, 65, 0.5, 1}).validate(6), ConfigError);
  CHECK_THROWS_AS(LossWeights::from_list({1, 15, 65, 0.5, 1}, 0.3).validate(6), ConfigError);
  CHECK_THROWS_AS(LossWeights::from_list({1, 15, 65, 0.5, 1}, 0.0).validate(6), ConfigError);
  const auto l = LossWeights::from_list({1, 15, 65, 0.5, 1}).as_list();
  CHECK(l[2] == 65.0);
}

TEST_CASE("Laplacian reconstruction NLL") {
  auto x = torch::rand({2, 1, 4, 4}, kF64);
  CHECK(recon_nll(x, x, torch::full_like(x, 0.5)).abs().max().item<double>() == 0.0);
  CHECK(recon_nll(x, x, torch::ones_like(x))[0].item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  auto xi = torch::tensor({0.2, 0.5, 0.9, 0.1}, kF64).view({1, 1, 2, 2});
  auto loc = torch::tensor({0.25, 0.4, 0.7, 0.1}, kF64).view({1, 1, 2, 2});
  auto b = torch::tensor({0.1, 0.3, 0.5, 0.2}, kF64).view({1, 1, 2, 2});
  CHECK(std::abs(recon_nll(xi, loc, b).item<double>() - oracle::kReconNll) < 1e-12);
  CHECK_THROWS_AS(recon_nll(xi, loc, torch::zeros_like(b)), NumericError);
  auto f = [&](const torch::Tensor& l) { return recon_nll(xi, l, b).sum(); };
  auto g = [&](const torch::Tensor& s) { return recon_nll(xi, loc, s).sum(); };
  CHECK(testutil::gradcheck(f, loc) < 1e-4);
  CHECK(testutil::gradcheck(g, b) < 1e-4);
}

TEST_CASE("segmentation loss") {
  auto labels = torch::tensor({0, 1, 2, 1}, torch::kLong).view({1, 2, 2});
  auto perfect = one_hot_labels(labels, 3, torch::kFloat64);
  CHECK(seg_loss(perfect, labels).item<double>() == doctest::Approx(0.0).epsilon(1e-9));
  auto uniform = torch::full({1, 2, 2, 2}, 0.5, kF64);
  auto lab2 = torch::tensor({0, 1, 1, 0}, torch::kLong).view({1, 2, 2});
  // CE = log 2; soft Dice of 0.5 against a half-full mask is (2 + e) / (4 + e).
  const double dice = (2 * 1.0 + 1e-5) / (2.0 + 2.0 + 1e-5);
  CHECK(seg_loss(uniform, lab2).item<double>() == doctest::Approx(std::log(2.0) + 1 - dice).epsilon(1e-12));
  auto probs = torch::tensor({0.7, 0.2, 0.1, 0.3, 0.2, 0.5, 0.3, 0.3, 0.1, 0.3, 0.6, 0.4}, kF64).view({1, 3, 2, 2});
  CHECK(std::abs(seg_loss(probs, labels).item<double>() - oracle::kSegLoss) < 1e-12);
  CHECK_THROWS_AS(seg_loss(probs, torch::full({1, 2, 2}, 3, torch::kLong)), DataError);
  auto logits = torch::randn({2, 3, 4, 4}, kF64);
  auto lab = torch::randint(0, 3, {2, 4, 4}, torch::kLong);
  auto f = [&](const torch::Tensor& z) { return seg_loss(torch::softmax(z, 1), lab).sum(); };
  CHECK(testutil::gradcheck(f, logits) < 1e-4);
}

TEST_CASE("usage loss") {
  CHECK(usage_loss(torch::full({4, 6}, 1.0 / 6, kF64), 0.05).item<double>() == 0.0);
  auto w = torch::zeros({2, 6}, kF64);
  w.narrow(1, 0, 5).fill_(0.2);
  CHECK(usage_loss(w, 0.05).item<double>() == doctest::Approx(0.05).epsilon(1e-14));
  std::mt19937_64 rng(2);
  std::vector<double> flat;
  for (int i = 0; i < 5; ++i) {
    auto r = testutil::random_simplex(rng, 4);
    r[3] *= 0.01;
    double s = r[0] + r[1] + r[2] + r[3];
    for (auto& v : r) flat.push_back(v / s);
  }
  auto wb = torch::tensor(flat, kF64).view({5, 4});
  double expect = 0.0;
  for (int m = 0; m < 4; ++m) {
    double mean = 0.0;
    for (int i = 0; i < 5; ++i) mean += flat[i * 4 + m] / 5;
    expect += std::max(0.0, 0.2 - mean);
  }
  CHECK(usage_loss(wb, 0.2).item<double>() == doctest::Approx(expect).epsilon(1e-14));
  auto f = [&](const torch::Tensor& z) { return usage_loss(torch::softmax(z, 1), 0.2); };
  CHECK(testutil::gradcheck(f, torch::log(wb)) < 1e-4);
}

TEST_CASE("structural dispersion loss") {
  auto lab = torch::randint(0, 3, {1, 6, 6}, torch::kLong);
  auto y = one_hot_labels(lab, 3, torch::kFloat64);
  auto w = torch::tensor({0.2, 0.3, 0.5}, kF64).view({1, 3});
  CHECK(struct_loss(torch::cat({y, y}), torch::cat({w, w})).item<double>() < 1e-12);
  CHECK(struct_loss(y, w).item<double>() == 0.0);

  auto a = torch::zeros({1, 3, 4, 4}, kF64);
  auto b = torch::zeros({1, 3, 4, 4}, kF64);
  a[0][0].fill_(1);
  a[0][1].narrow(0, 0, 2).fill_(1);
  a[0][0].narrow(0, 0, 2).fill_(0);
  b[0][0].fill_(1);
  b[0][2].narrow(0, 2, 2).fill_(1);
  b[0][0].narrow(0, 2, 2).fill_(0);
  auto e = torch::tensor({1.0, 0.0, 0.0, 0.0, 1.0, 0.0}, kF64).view({2, 3});
  // Disjoint labels (each class empty in one map) and disjoint one-hots.
  CHECK(struct_loss(torch::cat({a, b}), e).item<double>() < 1e-10);

  auto soft = torch::softmax(torch::randn({4, 3, 5, 5}, kF64), 1);
  auto logits = torch::randn({4, 3}, kF64);
  auto weights = torch::softmax(logits, 1);
  double expect = 0.0;
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      std::vector<double> wi(3), wj(3);
      for (int m = 0; m < 3; ++m) {
        wi[m] = weights[i][m].item<double>();
        wj[m] = weights[j][m].item<double>();
      }
      const double c = fr_similarity(CompositionWeights(wi), CompositionWeights(wj));
      const double d = dice_pair(soft[i], soft[j]) - c;
      expect += d * d;
    }
  }
  CHECK(struct_loss(soft, weights).item<double>() == doctest::Approx(expect).epsilon(1e-10));
  auto fw = [&](const torch::Tensor& z) { return struct_loss(soft, torch::softmax(z, 1)); };
  auto fy = [&](const torch::Tensor& s) { return struct_loss(s, weights); };
  CHECK(testutil::gradcheck(fw, logits) < 1e-4);
  CHECK(testutil::gradcheck(fy, soft) < 1e-4);
  CHECK(label_similarity(soft[0], soft[0]).item<double>() ==
        doctest::Approx(dice_pair(soft[0], soft[0])).epsilon(1e-12));
}

TEST_CASE("stage objectives") {
  torch::manual_seed(11);
  Model model(tiny_config());
  model->to(torch::kFloat64);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  auto xs = torch::rand({3, 1, 16, 16}, kF64);
  auto xt = torch::rand({3, 1, 16, 16}, kF64);
  auto ys = torch::randint(0, 3, {3, 16, 16}, torch::kLong);
  auto fs = model->forward(xs, SampleMode::kSampled, gen);
  auto ft = model->forward(xt, SampleMode::kSampled, gen);
  const auto w = LossWeights::from_list({1, 15, 65, 0.5, 1});

  auto ts = elbo_terms(xs, fs, &ys, {});
  auto tt = elbo_terms(xt, ft, nullptr, {});
  CHECK(!tt.seg.defined());
  CHECK_THROWS_AS(elbo_source(tt, w), DataError);
  auto zero = LossWeights::from_list({0, 0, 0, 0, 0});
  CHECK(elbo_source(ts, zero).abs().max().item<double>() == 0.0);
  auto no_seg = w;
  no_seg.seg = 0;
  CHECK(torch::equal(elbo_source(ts, no_seg), elbo_target(ts, w)));

  // Bookkeeping: recompute the objective from the report parts.
  auto sa = stage_loss_sa({xs, ys, fs}, {xt, ft}, *model->basis_bank, w);
  const double lb_s = (-w.seg * ts.seg - w.recon * ts.recon - w.vel * ts.vel).mean().item<double>();
  const double lb_t = (-w.recon * tt.recon - w.vel * tt.vel).mean().item<double>();
  CHECK(sa.lb_s == doctest::Approx(lb_s).epsilon(1e-12));
  CHECK(sa.lb_t == doctest::Approx(lb_t).epsilon(1e-12));
  CHECK(sa.tem == doctest::Approx(template_term(*model->basis_bank).item<double>()).epsilon(1e-12));
  CHECK(sa.structure == doctest::Approx(struct_term({xs, ys, fs}, 3).item<double>()).epsilon(1e-12));
  CHECK(sa.usage_s == doctest::Approx(usage_loss(fs.weights, w.tau).item<double>()).epsilon(1e-12));
  const double sa_total = -0.5 * (sa.lb_s + sa.lb_t) + w.tem * sa.tem + w.structure * sa.structure +
                          0.5 * (sa.usage_s + sa.usage_t);
  CHECK(std::abs(sa.total - sa_total) <= 1e-8 * std::abs(sa_total));
  CHECK(sa.total == sa.objective.item<double>());

  auto sf1 = stage_loss_sf1({xs, ys, fs}, *model->basis_bank, w);
  const double sf1_total = -sf1.lb_s + w.tem * sf1.tem + w.structure * sf1.structure + sf1.usage_s;
  CHECK(std::abs(sf1.total - sf1_total) <= 1e-8 * std::abs(sf1_total));
  auto sf2 = stage_loss_sf2({xt, ft}, w);
  CHECK(std::abs(sf2.total - (-sf2.lb_t + sf2.usage_t)) <= 1e-8 * std::abs(sf2.total));
  CHECK(sf2.seg == 0.0);

  // Zero weights leave only the usage hinge.
  auto only_usage = LossWeights::from_list({0, 0, 0, 0, 0}, 0.3);
  auto u = stage_loss_sf2({xt, ft}, only_usage);
  CHECK(u.total == doctest::Approx(usage_loss(ft.weights, 0.3).item<double>()).epsilon(1e-12));
  auto u1 = stage_loss_sf1({xs, ys, fs}, *model->basis_bank, only_usage);
  CHECK(u1.total == doctest::Approx(usage_loss(fs.weights, 0.3).item<double>()).epsilon(1e-12));

  auto ablated = w;
  ablated.usage_enabled = false;
  auto a = stage_loss_sa({xs, ys, fs}, {xt, ft}, *model->basis_bank, ablated);
  CHECK(a.usage_s == 0.0);
  CHECK(a.usage_t == 0.0);
}

TEST_CASE("decomposition identity") {
  torch::manual_seed(12);
  Model model(tiny_config());
  model->to(torch::kFloat64);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  auto xs = torch::rand({2, 1, 16, 16}, kF64);
  auto xt = torch::rand({2, 1, 16, 16}, kF64);
  auto ys = torch::randint(0, 3, {2, 16, 16}, torch::kLong);
  auto fs = model->forward(xs, SampleMode::kSampled, gen);
  auto ft = model->forward(xt, SampleMode::kSampled, gen);
  auto w = LossWeights::from_list({1, 15, 65, 0.5, 1});
  auto w1 = w;
  w1.tem *= 2;
  w1.structure *= 2;
  const double sa = stage_loss_sa({xs, ys, fs}, {xt, ft}, *model->basis_bank, w).total;
  const double sf = 0.5 * (stage_loss_sf1({xs, ys, fs}, *model->basis_bank, w1).total + stage_loss_sf2({xt, ft}, w).total);
  CHECK(std::abs(sa - sf) <= 1e-6 * std::abs(sa));
}

}
