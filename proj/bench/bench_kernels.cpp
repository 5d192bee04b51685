// Serial reference kernels against their OpenMP versions. Run with
// FLOWSYNTH_THREADS unset to use every core, e.g.
//   ./build/bench/bench_kernels --benchmark_filter=conv
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "flowsynth/kernels.hpp"

namespace {

namespace k = flowsynth::kernels;

std::vector<double> noise(std::size_t n, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

// args: channels, edge
k::ConvGeom conv_geom(const benchmark::State& st) {
  const auto c = static_cast<std::size_t>(st.range(0));
  const auto e = static_cast<std::size_t>(st.range(1));
  return k::ConvGeom::make(c, c, 3, 1, 1, e, e, e);
}

template <bool Omp>
void BM_conv3d_forward(benchmark::State& st) {
  const auto g = conv_geom(st);
  const auto in = noise(g.in_size(), 1), w = noise(g.weight_size(), 2), b = noise(g.co, 3);
  std::vector<double> out(g.out_size());
  for (auto _ : st) {
    if constexpr (Omp) k::omp::conv3d_forward(g, in, w, b, out);
    else k::serial::conv3d_forward(g, in, w, b, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Omp>
void BM_conv3d_backward(benchmark::State& st) {
  const auto g = conv_geom(st);
  const auto in = noise(g.in_size(), 1), w = noise(g.weight_size(), 2), gout = noise(g.out_size(), 3);
  std::vector<double> gin(g.in_size()), gw(g.weight_size()), gb(g.co);
  for (auto _ : st) {
    if constexpr (Omp) {
      k::omp::conv3d_backward_input(g, gout, w, gin);
      k::omp::conv3d_backward_weight(g, in, gout, gw, gb);
    } else {
      k::serial::conv3d_backward_input(g, gout, w, gin);
      k::serial::conv3d_backward_weight(g, in, gout, gw, gb);
    }
    benchmark::DoNotOptimize(gin.data());
    benchmark::DoNotOptimize(gw.data());
  }
}

template <bool Omp>
void BM_gemm(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = noise(n * n, 1), b = noise(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : st) {
    if constexpr (Omp) k::omp::gemm(false, true, n, n, n, a, b, c, false);
    else k::serial::gemm(false, true, n, n, n, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
}

template <bool Omp>
void BM_layer_norm(benchmark::State& st) {
  const auto c = static_cast<std::size_t>(st.range(0));
  const auto sites = static_cast<std::size_t>(st.range(1));
  const auto x = noise(c * sites, 1), gain = noise(c, 2), bias = noise(c, 3), gy = noise(c * sites, 4);
  std::vector<double> y(c * sites), xhat(c * sites), rstd(sites), gx(c * sites), gg(c), gb(c);
  for (auto _ : st) {
    if constexpr (Omp) {
      k::omp::layer_norm_forward(c, sites, x, gain, bias, 1e-5, y, xhat, rstd);
      k::omp::layer_norm_backward(c, sites, gy, xhat, rstd, gain, gx, gg, gb);
    } else {
      k::serial::layer_norm_forward(c, sites, x, gain, bias, 1e-5, y, xhat, rstd);
      k::serial::layer_norm_backward(c, sites, gy, xhat, rstd, gain, gx, gg, gb);
    }
    benchmark::DoNotOptimize(gx.data());
  }
}

template <bool Omp>
void BM_ssim_map(benchmark::State& st) {
  const auto e = static_cast<std::size_t>(st.range(0));
  const std::size_t w = 7;
  const auto a = noise(e * e * e, 1), b = noise(e * e * e, 2);
  std::vector<double> out((e - w + 1) * (e - w + 1) * (e - w + 1));
  for (auto _ : st) {
    if constexpr (Omp) k::omp::ssim_map(e, e, e, w, a, b, 1e-4, 9e-4, out);
    else k::serial::ssim_map(e, e, e, w, a, b, 1e-4, 9e-4, out);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_conv3d_forward<false>)->Args({8, 16})->Args({16, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv3d_forward<true>)->Args({8, 16})->Args({16, 32})->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_conv3d_backward<false>)->Args({8, 16})->Args({16, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv3d_backward<true>)->Args({8, 16})->Args({16, 32})->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_gemm<false>)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_gemm<true>)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_layer_norm<false>)->Args({16, 4096})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_layer_norm<true>)->Args({16, 4096})->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_ssim_map<false>)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ssim_map<true>)->Arg(32)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
