#include <benchmark/benchmark.h>

#include <vector>

#include "chmffn/gemm.hpp"
#include "chmffn/model.hpp"
#include "chmffn/nn.hpp"
#include "chmffn/rng.hpp"
#include "chmffn/tape.hpp"

using namespace chmffn;

static void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  std::vector<double> a(n * n), b(n * n), c(n * n);
  for (auto& v : a) v = rng.uniform();
  for (auto& v : b) v = rng.uniform();
  for (auto _ : state) {
    gemm(false, false, n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * static_cast<double>(n * n * n),
                                                 benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Gemm)->Arg(32)->Arg(128)->Arg(256);

static void BM_Conv2d(benchmark::State& state) {
  const auto ch = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Tensor x = uniform_tensor({32, ch, 5, 5}, -1, 1, rng);
  const Tensor w = uniform_tensor({ch, ch, 3, 3}, -1, 1, rng);
  const Tensor b = uniform_tensor({ch}, -1, 1, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv2d(x, w, b));
}
BENCHMARK(BM_Conv2d)->Arg(8)->Arg(32);

static void BM_ForwardPair(benchmark::State& state) {
  ModelConfig cfg;
  cfg.bands = 8;
  cfg.patch = 5;
  cfg.base_channels = static_cast<std::size_t>(state.range(0));
  ChmffnModel model(cfg);
  Rng rng(3);
  const Tensor p1 = uniform_tensor({32, 8, 5, 5}, 0, 1, rng);
  const Tensor p2 = uniform_tensor({32, 8, 5, 5}, 0, 1, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward_pair(p1, p2, nn::Mode::eval));
}
BENCHMARK(BM_ForwardPair)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);

static void BM_TrainStep(benchmark::State& state) {
  ModelConfig cfg;
  cfg.bands = 8;
  cfg.patch = 5;
  cfg.base_channels = 4;
  ChmffnModel model(cfg);
  Rng rng(4);
  const Tensor p1 = uniform_tensor({8, 8, 5, 5}, 0, 1, rng);
  const Tensor p2 = uniform_tensor({8, 8, 5, 5}, 0, 1, rng);
  const std::vector<int> labels{1, 0, 1, 0, 0, 1, 0, 0};
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = bce_loss(model.forward_pair(p1, p2, nn::Mode::train), labels);
    tape.backward(loss);
    for (auto& p : model.parameters()) p.zero_grad();
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
