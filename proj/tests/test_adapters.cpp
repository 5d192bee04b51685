#include <cmath>

#include "doctest.h"
#include "flowsynth/adapters.hpp"
#include "flowsynth/error.hpp"
#include "flowsynth/rng.hpp"
#include "support/adapter_oracle.hpp"

using namespace flowsynth;
using namespace flowsynth::adapters;
using testing::grid_best_term;

namespace {

Embedding random_embedding(SplitMix64& rng, std::size_t dim) {
  Embedding v(dim);
  for (double& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("cosine_sim examples") {
  const Embedding u{0.3, -1.2, 2.0};
  const Embedding neg{-0.3, 1.2, -2.0};
  CHECK(cosine_sim(u, u) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine_sim(u, neg) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(cosine_sim(Embedding{1, 0}, Embedding{1, 1}) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  try {
    (void)cosine_sim(Embedding{0, 0}, Embedding{1, 1});
    FAIL("expected ZeroVector");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::zero_vector);
  }
}

TEST_CASE("cosine_sim is symmetric, bounded and scale invariant") {
  SplitMix64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto u = random_embedding(rng, 8), v = random_embedding(rng, 8);
    const double s = cosine_sim(u, v);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
    CHECK(cosine_sim(v, u) == s);
    const double k = rng.uniform(0.01, 100.0);
    Embedding ku(u);
    for (double& x : ku) x *= k;
    CHECK(cosine_sim(ku, v) == doctest::Approx(s).epsilon(1e-13));
  }
}

TEST_CASE("identity adapters are optimal when embeddings already match") {
  const Embedding cf{1.0, 0.2, 0.0}, ca{0.8, 0.6, 0.1};
  REQUIRE(cosine_sim(cf, ca) >= 0.5);
  const auto r = align_adapters(cf, ca, cf, ca, {.tau = 0.5, .mu = 10.0, .steps = 50, .lr = 0.05});
  CHECK(r.history.front() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(r.f.scale == 1.0);
  CHECK(r.a.scale == 1.0);
  for (double b : r.f.bias) CHECK(std::abs(b) < 1e-15);
  CHECK_FALSE(r.constraint_warning);
}

TEST_CASE("2-D instance reaches the grid-search optimum") {
  const Embedding cf{1, 0}, mf{0, 1}, ca{1, 1}, ma{1, 2};
  const auto r = align_adapters(cf, ca, mf, ma, {.tau = 0.5, .mu = 10.0, .steps = 500, .lr = 0.05});
  const double grid_f = grid_best_term(cf, mf);
  const double grid_a = grid_best_term(ca, ma);
  CHECK(grid_f < 1e-3);
  CHECK(r.term_f < 1e-3);
  CHECK(r.term_a < 1e-3);
  CHECK(r.term_f <= grid_f + 1e-9);
  CHECK(r.term_a <= grid_a + 1e-9);
  CHECK(r.constraint_residual < 1e-3);
  CHECK(r.cross_sim >= 0.5 - 1e-3);
}

TEST_CASE("tau 0 decouples and beats a scale-only fit") {
  SplitMix64 rng(8);
  const auto cf = random_embedding(rng, 6), ca = random_embedding(rng, 6);
  const auto mf = random_embedding(rng, 6), ma = random_embedding(rng, 6);
  const auto r = align_adapters(cf, ca, mf, ma, {.tau = 0.0, .mu = 10.0, .steps = 300, .lr = 0.05});
  // scale-only: sim(s c, m) is sim(c, m) for s > 0 and -sim(c, m) for s < 0
  CHECK(1.0 - r.term_f >= std::abs(cosine_sim(cf, mf)));
  CHECK(1.0 - r.term_a >= std::abs(cosine_sim(ca, ma)));
}

TEST_CASE("loss history is non-increasing") {
  SplitMix64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const auto cf = random_embedding(rng, 16), ca = random_embedding(rng, 16);
    const auto mf = random_embedding(rng, 16), ma = random_embedding(rng, 16);
    const auto r = align_adapters(cf, ca, mf, ma, {.tau = 0.5, .mu = 10.0, .steps = 200, .lr = 0.05});
    REQUIRE(r.history.size() == 201);
    for (std::size_t i = 1; i < r.history.size(); ++i) CHECK(r.history[i] <= r.history[i - 1] + 1e-6);
    CHECK(r.history.back() <= r.history.front());
  }
}

TEST_CASE("mu 0 joint run equals two separate runs") {
  SplitMix64 rng(21);
  const auto cf = random_embedding(rng, 10), ca = random_embedding(rng, 10);
  const auto mf = random_embedding(rng, 10), ma = random_embedding(rng, 10);
  const auto joint = align_adapters(cf, ca, mf, ma, {.tau = 0.9, .mu = 0.0, .steps = 120, .lr = 0.05});
  const auto f = align_single(cf, mf, 120, 0.05);
  const auto a = align_single(ca, ma, 120, 0.05);
  CHECK(joint.f.scale == f.scale);
  CHECK(joint.f.bias == f.bias);
  CHECK(joint.a.scale == a.scale);
  CHECK(joint.a.bias == a.bias);
}

TEST_CASE("conflicting targets raise the constraint warning") {
  // mean_f and mean_a are orthogonal, so both alignment terms cannot vanish
  // while the adapted vectors stay 0.95-similar; a weak penalty lets it slip.
  const Embedding cf{1, 0}, ca{0, 1}, mf{1, 0}, ma{0, 1};
  const auto r = align_adapters(cf, ca, mf, ma, {.tau = 0.95, .mu = 0.1, .steps = 300, .lr = 0.05});
  CHECK(r.constraint_warning);
  CHECK(r.constraint_residual > 1e-3);
}

TEST_CASE("build_context examples") {
  const Embedding e1{1, 0, 0}, e2{0, 1, 0};
  const auto ctx = build_context(Modality::a, AffineAdapter::identity(3), e1, e2);
  CHECK(ctx.modality == Modality::a);
  CHECK(ctx.tokens.shape() == diff::Shape{2, 3});
  CHECK(std::vector<double>(ctx.tokens.data().begin(), ctx.tokens.data().end()) ==
        std::vector<double>{1, 0, 0, 0, 1, 0});
  CHECK_FALSE(ctx.tokens.requires_grad());

  const auto doubled = build_context(Modality::f, {2.0, {0, 0, 0}}, Embedding{0.5, -1, 3}, e2);
  CHECK(doubled.tokens.data()[0] == 1.0);
  CHECK(doubled.tokens.data()[1] == -2.0);
  CHECK(doubled.tokens.data()[2] == 6.0);

  try {
    (void)build_context(Modality::f, AffineAdapter::identity(3), e1, Embedding{1, 2});
    FAIL("expected DimMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::dim_mismatch);
  }
}

TEST_CASE("synthetic provider") {
  const SyntheticEmbeddingProvider p(3, 64);
  const SyntheticEmbeddingProvider q(3, 64);
  CHECK(p.text(Modality::f) == q.text(Modality::f));
  CHECK(p.demographic(0.3, {}) == q.demographic(0.3, {}));
  CHECK(p.text(Modality::f) != p.text(Modality::a));
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const SyntheticEmbeddingProvider r(seed, 64);
    CHECK(cosine_sim(r.demographic(0.2, {}), r.demographic(0.8, {})) < 0.99);
  }
  // injective along severity: distinct severities never collide
  for (double s = 0.0; s < 1.0; s += 0.05) CHECK(p.demographic(s, {}) != p.demographic(s + 0.05, {}));
}
