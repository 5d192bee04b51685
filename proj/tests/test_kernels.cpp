#include <vector>

#include "doctest.h"
#include "flowsynth/kernels.hpp"
#include "flowsynth/rng.hpp"

using namespace flowsynth;
namespace k = flowsynth::kernels;

namespace {

std::vector<double> random_values(SplitMix64& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

struct ThreadGuard {
  ~ThreadGuard() { k::set_thread_count(0); }
};

}  // namespace

TEST_CASE("conv kernels: OpenMP variant is bit-identical to the serial reference") {
  ThreadGuard guard;
  for (int threads : {1, 3}) {
    k::set_thread_count(threads);
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
      SplitMix64 rng(seed);
      const std::size_t kk = 1 + rng.below(3);
      const std::size_t stride = 1 + rng.below(2);
      const std::size_t pad = rng.below(kk);
      const std::size_t d = kk + rng.below(4), h = kk + rng.below(4), w = kk + rng.below(4);
      const auto g = k::ConvGeom::make(1 + rng.below(3), 1 + rng.below(3), kk, stride, pad, d, h, w);
      const auto in = random_values(rng, g.in_size());
      const auto wt = random_values(rng, g.weight_size());
      const auto bias = random_values(rng, g.co);
      const auto gout = random_values(rng, g.out_size());

      std::vector<double> a(g.out_size()), b(g.out_size());
      k::serial::conv3d_forward(g, in, wt, bias, a);
      k::omp::conv3d_forward(g, in, wt, bias, b);
      CHECK(a == b);

      std::vector<double> gi_a(g.in_size(), 0.5), gi_b(g.in_size(), 0.5);
      k::serial::conv3d_backward_input(g, gout, wt, gi_a);
      k::omp::conv3d_backward_input(g, gout, wt, gi_b);
      CHECK(gi_a == gi_b);

      std::vector<double> gw_a(g.weight_size(), 0.0), gw_b(g.weight_size(), 0.0);
      std::vector<double> gb_a(g.co, 0.0), gb_b(g.co, 0.0);
      k::serial::conv3d_backward_weight(g, in, gout, gw_a, gb_a);
      k::omp::conv3d_backward_weight(g, in, gout, gw_b, gb_b);
      CHECK(gw_a == gw_b);
      CHECK(gb_a == gb_b);
    }
  }
}

TEST_CASE("conv backward kernels are the adjoint of the forward kernel") {
  // <conv(x), y> == <x, conv^T(y)> and the weight gradient matches the same pairing.
  SplitMix64 rng(7);
  const auto g = k::ConvGeom::make(2, 3, 3, 2, 1, 5, 4, 6);
  const auto x = random_values(rng, g.in_size());
  const auto w = random_values(rng, g.weight_size());
  const auto y = random_values(rng, g.out_size());
  std::vector<double> cx(g.out_size());
  k::serial::conv3d_forward(g, x, w, {}, cx);
  std::vector<double> cty(g.in_size(), 0.0);
  k::serial::conv3d_backward_input(g, y, w, cty);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * cty[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

  std::vector<double> gw(g.weight_size(), 0.0);
  k::serial::conv3d_backward_weight(g, x, y, gw, {});
  double wdot = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) wdot += w[i] * gw[i];
  CHECK(wdot == doctest::Approx(lhs).epsilon(1e-12));
}

TEST_CASE("gemm: OpenMP variant is bit-identical to the serial reference") {
  ThreadGuard guard;
  k::set_thread_count(2);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    SplitMix64 rng(seed);
    const bool ta = seed & 1, tb = seed & 2, acc = seed & 4;
    const std::size_t m = 1 + rng.below(7), n = 1 + rng.below(7), kk = 1 + rng.below(7);
    const auto a = random_values(rng, m * kk);
    const auto b = random_values(rng, kk * n);
    auto c1 = random_values(rng, m * n);
    auto c2 = c1;
    k::serial::gemm(ta, tb, m, n, kk, a, b, c1, acc);
    k::omp::gemm(ta, tb, m, n, kk, a, b, c2, acc);
    CHECK(c1 == c2);
  }
}

TEST_CASE("gemm matches a naive triple loop") {
  const std::vector<double> a{1, 2, 3, 4, 5, 6};  // 2x3
  const std::vector<double> b{7, 8, 9, 10, 11, 12};  // 3x2
  std::vector<double> c(4);
  k::omp::gemm(false, false, 2, 2, 3, a, b, c, false);
  CHECK(c == std::vector<double>{58, 64, 139, 154});
  // a^T (3x2 view of stored 2x3) times a (2x3): 3x3
  std::vector<double> ata(9);
  k::omp::gemm(true, false, 3, 3, 2, a, a, ata, false);
  CHECK(ata[0] == 17);
  CHECK(ata[4] == 29);
  CHECK(ata[8] == 45);
}

TEST_CASE("layer norm kernels: OpenMP variant is bit-identical to the serial reference") {
  ThreadGuard guard;
  k::set_thread_count(2);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SplitMix64 rng(seed);
    const std::size_t c = 1 + rng.below(6), s = 1 + rng.below(30);
    const auto x = random_values(rng, c * s);
    const auto gain = random_values(rng, c);
    const auto bias = random_values(rng, c);
    const auto gy = random_values(rng, c * s);
    std::vector<double> y1(c * s), y2(c * s), h1(c * s), h2(c * s), r1(s), r2(s);
    k::serial::layer_norm_forward(c, s, x, gain, bias, 1e-5, y1, h1, r1);
    k::omp::layer_norm_forward(c, s, x, gain, bias, 1e-5, y2, h2, r2);
    CHECK(y1 == y2);
    std::vector<double> gx1(c * s, 0.0), gx2(c * s, 0.0), gg1(c, 0.0), gg2(c, 0.0), gb1(c, 0.0), gb2(c, 0.0);
    k::serial::layer_norm_backward(c, s, gy, h1, r1, gain, gx1, gg1, gb1);
    k::omp::layer_norm_backward(c, s, gy, h2, r2, gain, gx2, gg2, gb2);
    CHECK(gx1 == gx2);
    CHECK(gg1 == gg2);
    CHECK(gb1 == gb2);
  }
}
