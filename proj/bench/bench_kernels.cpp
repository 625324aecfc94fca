// Serial reference kernels against their OpenMP variants, at the shapes the
// desk model uses, plus one full forward/backward pass.

#include <benchmark/benchmark.h>

#include <vector>

#include "mba/kernels.hpp"
#include "mba/model.hpp"
#include "mba/training.hpp"

namespace {

using mba::kernels::ConvGeometry;
using mba::kernels::Index;

std::vector<float> filled(std::size_t n, std::uint64_t seed) {
  mba::Rng rng(seed);
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

// Args: M, N, K. 64x96x384 is an MLP projection on 64 tokens, 96x256x64 a
// domain-branch 3x3 conv on a 16x16 map.
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const Index m = state.range(0), n = state.range(1), k = state.range(2);
  const auto a = filled(static_cast<std::size_t>(m * k), 1);
  const auto b = filled(static_cast<std::size_t>(k * n), 2);
  std::vector<float> c(static_cast<std::size_t>(m * n));
  for (auto _ : state) {
    if constexpr (Parallel) {
      mba::kernels::parallel::gemm(false, false, m, n, k, a.data(), b.data(), c.data(), false);
    } else {
      mba::kernels::serial::gemm(false, false, m, n, k, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * m * n * k);
}
BENCHMARK(BM_Gemm<false>)->Args({64, 96, 384})->Args({576, 256, 64})->Args({256, 256, 256});
BENCHMARK(BM_Gemm<true>)->Args({64, 96, 384})->Args({576, 256, 64})->Args({256, 256, 256});

template <bool Parallel>
void BM_Im2col(benchmark::State& state) {
  const ConvGeometry g{state.range(0), state.range(1), state.range(1), 3, 1, 1};
  const auto image = filled(static_cast<std::size_t>(g.channels * g.height * g.width), 3);
  std::vector<float> cols(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
  for (auto _ : state) {
    if constexpr (Parallel) {
      mba::kernels::parallel::im2col(g, image.data(), cols.data());
    } else {
      mba::kernels::serial::im2col(g, image.data(), cols.data());
    }
    benchmark::DoNotOptimize(cols.data());
  }
}
BENCHMARK(BM_Im2col<false>)->Args({32, 16})->Args({64, 16});
BENCHMARK(BM_Im2col<true>)->Args({32, 16})->Args({64, 16});

template <bool Parallel>
void BM_Col2im(benchmark::State& state) {
  const ConvGeometry g{state.range(0), state.range(1), state.range(1), 3, 1, 1};
  const auto cols = filled(static_cast<std::size_t>(g.col_rows() * g.col_cols()), 4);
  std::vector<float> image(static_cast<std::size_t>(g.channels * g.height * g.width));
  for (auto _ : state) {
    std::fill(image.begin(), image.end(), 0.0f);
    if constexpr (Parallel) {
      mba::kernels::parallel::col2im(g, cols.data(), image.data());
    } else {
      mba::kernels::serial::col2im(g, cols.data(), image.data());
    }
    benchmark::DoNotOptimize(image.data());
  }
}
BENCHMARK(BM_Col2im<false>)->Args({32, 16})->Args({64, 16});
BENCHMARK(BM_Col2im<true>)->Args({32, 16})->Args({64, 16});

void BM_DeskForwardBackward(benchmark::State& state) {
  const mba::ModelConfig cfg;
  mba::MbaNet<float> net(cfg, 0);
  const Index b = 2;
  const auto xs = mba::Tensor<float>::from_data({b, 1, cfg.x_s, cfg.x_s}, filled(b * cfg.x_s * cfg.x_s, 5));
  const auto xc = mba::Tensor<float>::from_data({b, 1, cfg.x_c, cfg.x_c}, filled(b * cfg.x_c * cfg.x_c, 6));
  auto target = mba::Tensor<float>::zeros({b, 1, cfg.x_c, cfg.x_c});
  for (auto _ : state) {
    net.params().zero_grad();
    mba::seg_loss(net.forward(xs, xc), target).backward();
  }
  state.counters["threads"] = mba::kernels::max_threads();
}
BENCHMARK(BM_DeskForwardBackward)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
