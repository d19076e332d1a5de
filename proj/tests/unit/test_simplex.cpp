#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "oracle_values.hpp"
#include "test_util.hpp"
#include "udaseg/errors.hpp"
#include "udaseg/simplex.hpp"

using namespace udaseg;
using std::numbers::pi;

TEST_SUITE("simplex") {

TEST_CASE("weights are validated on construction") {
  CHECK_THROWS_AS(CompositionWeights({0.5, 0.6}), DomainError);
  CHECK_THROWS_AS(CompositionWeights({1.2, -0.2}), DomainError);
  CHECK_THROWS_AS(CompositionWeights({1.0}), DomainError);
  CHECK_NOTHROW(CompositionWeights({0.25, 0.75}));
}

TEST_CASE("analytic distances") {
  const auto e1 = CompositionWeights::one_hot(2, 0);
  const auto e2 = CompositionWeights::one_hot(2, 1);
  const CompositionWeights half({0.5, 0.5});
  CHECK(fisher_rao_distance(e1, e1) == 0.0);
  CHECK(std::abs(fisher_rao_distance(e1, half) - pi / 2) < 1e-12);
  CHECK(std::abs(fisher_rao_distance(e1, e2) - pi) < 1e-12);
  CHECK(fr_similarity(e1, e1) == 1.0);
  CHECK(std::abs(fr_similarity(e1, e2)) < 1e-12);
  CHECK(std::abs(fr_similarity(e1, half) - 0.5) < 1e-12);
}

TEST_CASE("geodesic endpoints and midpoint") {
  const auto e1 = CompositionWeights::one_hot(2, 0);
  const auto e2 = CompositionWeights::one_hot(2, 1);
  const CompositionWeights w({0.1, 0.9});
  CHECK(geodesic_interpolate(w, e2, 0.0).vector() == w.vector());
  const auto mid = geodesic_interpolate(e1, e2, 0.5);
  CHECK(std::abs(mid[0] - 0.5) < 1e-12);
  CHECK(std::abs(mid[1] - 0.5) < 1e-12);
  // Identical inputs: degenerate arc, returns the input.
  CHECK(geodesic_interpolate(w, w, 0.7).vector() == w.vector());
}

TEST_CASE("geodesic matches the great-circle oracle") {
  const CompositionWeights a({0.1, 0.2, 0.3, 0.4});
  const CompositionWeights b({0.4, 0.3, 0.2, 0.1});
  const auto g = geodesic_interpolate(a, b, 0.3);
  CHECK(std::abs(g[0] - oracle::kGeodesic0) < 1e-12);
  CHECK(std::abs(g[1] - oracle::kGeodesic1) < 1e-12);
  CHECK(std::abs(g[2] - oracle::kGeodesic2) < 1e-12);
  CHECK(std::abs(g[3] - oracle::kGeodesic3) < 1e-12);
  CHECK(std::abs(fisher_rao_distance(a, b) - oracle::kFisherRao) < 1e-12);
}

TEST_CASE("metric properties on random triples") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    const CompositionWeights a(testutil::random_simplex(rng, 6));
    const CompositionWeights b(testutil::random_simplex(rng, 6));
    const CompositionWeights c(testutil::random_simplex(rng, 6));
    const double ab = fisher_rao_distance(a, b);
    CHECK(ab == doctest::Approx(fisher_rao_distance(b, a)).epsilon(1e-14));
    CHECK(ab >= 0.0);
    CHECK(ab <= pi);
    CHECK(fisher_rao_distance(a, c) <= ab + fisher_rao_distance(b, c) + 1e-6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double alpha = u(rng);
    const auto g = geodesic_interpolate(a, b, alpha);
    CHECK(std::abs(fisher_rao_distance(g, a) - alpha * ab) < 1e-5);
  }
}

TEST_CASE("disjoint supports interpolate through the orthant") {
  const CompositionWeights a({0.5, 0.5, 0.0, 0.0});
  const CompositionWeights b({0.0, 0.0, 0.3, 0.7});
  CHECK(std::abs(fisher_rao_distance(a, b) - pi) < 1e-12);
  const auto g = geodesic_interpolate(a, b, 0.25);
  double s = 0;
  for (double v : g.vector()) s += v;
  CHECK(std::abs(s - 1.0) < 1e-12);
  CHECK(std::abs(fisher_rao_distance(g, a) - 0.25 * pi) < 1e-9);
}

TEST_CASE("geodesic path") {
  const auto path = geodesic_path(CompositionWeights::one_hot(3, 0), CompositionWeights::one_hot(3, 2), 5);
  REQUIRE(path.size() == 5);
  CHECK(path.front()[0] == 1.0);
  CHECK(std::abs(path.back()[2] - 1.0) < 1e-12);
  CHECK_THROWS_AS(geodesic_path(path[0], path[1], 1), DomainError);
}

TEST_CASE("batched distance agrees and has finite gradients") {
  std::mt19937_64 rng(5);
  std::vector<double> flat_a, flat_b;
  std::vector<CompositionWeights> as, bs;
  for (int i = 0; i < 8; ++i) {
    as.emplace_back(testutil::random_simplex(rng, 4));
    bs.emplace_back(testutil::random_simplex(rng, 4));
    flat_a.insert(flat_a.end(), as.back().vector().begin(), as.back().vector().end());
    flat_b.insert(flat_b.end(), bs.back().vector().begin(), bs.back().vector().end());
  }
  auto ta = torch::tensor(flat_a, testutil::kF64).view({8, 4});
  auto tb = torch::tensor(flat_b, testutil::kF64).view({8, 4});
  auto d = batched::fisher_rao_distance(ta, tb);
  for (int i = 0; i < 8; ++i) CHECK(std::abs(d[i].item<double>() - fisher_rao_distance(as[i], bs[i])) < 1e-12);
  auto x = ta.clone().set_requires_grad(true);
  batched::fisher_rao_distance(x, x.detach()).sum().backward();
  CHECK(torch::isfinite(x.grad()).all().item<bool>());
}

}
