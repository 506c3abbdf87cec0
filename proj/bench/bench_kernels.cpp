#include <benchmark/benchmark.h>

#include <vector>

#include "omae/core/kernels.hpp"
#include "omae/core/rng.hpp"
#include "omae/core/tensor.hpp"
#include "omae/vit/vit.hpp"

using namespace omae;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = noise(n * n, 1), b = noise(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::gemm(false, false, n, n, n, a.data(), b.data(), c.data(), false);
    else
      kernels::serial::gemm(false, false, n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), n = std::size_t{256};
  const auto x = noise(rows * n, 3);
  std::vector<float> y(rows * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::softmax_rows(x.data(), rows, n, y.data());
    else
      kernels::serial::softmax_rows(x.data(), rows, n, y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_LayerNorm(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), d = std::size_t{256};
  const auto x = noise(rows * d, 4);
  std::vector<float> xhat(rows * d), mean(rows), rstd(rows);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::layer_norm_rows(x.data(), rows, d, 1e-6, xhat.data(), mean.data(), rstd.data());
    else
      kernels::serial::layer_norm_rows(x.data(), rows, d, 1e-6, xhat.data(), mean.data(), rstd.data());
    benchmark::DoNotOptimize(xhat.data());
  }
}

template <bool Parallel>
void BM_Gelu(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = noise(n, 5);
  std::vector<float> y(n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::gelu(x.data(), n, y.data());
    else
      kernels::serial::gelu(x.data(), n, y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

// Whole desk-scale encoder forward pass (uses the parallel kernels).
void BM_DeskEncoder(benchmark::State& state) {
  Rng rng(6);
  const auto enc = vit::VitEncoder<float>::create(vit::ViTConfig::desk(), rng);
  Tensor<float> x({static_cast<std::size_t>(state.range(0)), 3, 64, 64});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(enc.encode(x).pooled.values().data());
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Softmax<false>)->Name("softmax/serial")->Arg(256)->Arg(2048);
BENCHMARK(BM_Softmax<true>)->Name("softmax/parallel")->Arg(256)->Arg(2048);
BENCHMARK(BM_LayerNorm<false>)->Name("layer_norm/serial")->Arg(256)->Arg(2048);
BENCHMARK(BM_LayerNorm<true>)->Name("layer_norm/parallel")->Arg(256)->Arg(2048);
BENCHMARK(BM_Gelu<false>)->Name("gelu/serial")->Arg(1 << 16)->Arg(1 << 20);
BENCHMARK(BM_Gelu<true>)->Name("gelu/parallel")->Arg(1 << 16)->Arg(1 << 20);
BENCHMARK(BM_DeskEncoder)->Name("encoder/desk")->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
