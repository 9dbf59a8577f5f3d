// Parallel kernels against their serial references, plus whole-model
// forward passes. Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <random>
#include <vector>

#include "ddanet/kernels.hpp"
#include "ddanet/model.hpp"

using namespace ddanet;
namespace k = ddanet::kernels;

namespace {

std::vector<float> noise(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

// Args: channels, spatial size. 3x3, stride 1, padding 1, batch 2.
k::ConvGeometry geometry(const benchmark::State& s) {
  const auto c = static_cast<std::size_t>(s.range(0)), hw = static_cast<std::size_t>(s.range(1));
  return k::make_conv_geometry(2, c, hw, hw, c, 3, 3, 1, 1);
}

void set_flops(benchmark::State& s, const k::ConvGeometry& g) {
  s.counters["GFLOP/s"] = benchmark::Counter(2.0 * static_cast<double>(g.out_size() * g.in_c * g.k_h * g.k_w),
                                             benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& s) {
  const auto g = geometry(s);
  const auto x = noise(g.in_size(), 1), w = noise(g.weight_size(), 2), b = noise(g.out_c, 3);
  std::vector<float> y(g.out_size());
  for (auto _ : s) {
    if constexpr (Parallel) k::conv2d_forward(g, x.data(), w.data(), b.data(), y.data());
    else k::reference::conv2d_forward(g, x.data(), w.data(), b.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
  set_flops(s, g);
}

template <bool Parallel>
void BM_ConvBackwardInput(benchmark::State& s) {
  const auto g = geometry(s);
  const auto dy = noise(g.out_size(), 1), w = noise(g.weight_size(), 2);
  std::vector<float> dx(g.in_size());
  for (auto _ : s) {
    if constexpr (Parallel) k::conv2d_backward_input(g, dy.data(), w.data(), dx.data());
    else k::reference::conv2d_backward_input(g, dy.data(), w.data(), dx.data());
    benchmark::DoNotOptimize(dx.data());
  }
  set_flops(s, g);
}

template <bool Parallel>
void BM_ConvBackwardWeight(benchmark::State& s) {
  const auto g = geometry(s);
  const auto x = noise(g.in_size(), 1), dy = noise(g.out_size(), 2);
  std::vector<float> dw(g.weight_size()), db(g.out_c);
  for (auto _ : s) {
    if constexpr (Parallel) k::conv2d_backward_weight(g, x.data(), dy.data(), dw.data(), db.data());
    else k::reference::conv2d_backward_weight(g, x.data(), dy.data(), dw.data(), db.data());
    benchmark::DoNotOptimize(dw.data());
  }
  set_flops(s, g);
}

template <bool Parallel>
void BM_MaxPool(benchmark::State& s) {
  const auto planes = static_cast<std::size_t>(s.range(0)), hw = static_cast<std::size_t>(s.range(1));
  const auto x = noise(planes * hw * hw, 1);
  std::vector<float> y(planes * hw * hw / 4);
  std::vector<std::int32_t> arg(y.size());
  for (auto _ : s) {
    if constexpr (Parallel) k::maxpool2x2_forward(planes, hw, hw, x.data(), y.data(), arg.data());
    else k::reference::maxpool2x2_forward(planes, hw, hw, x.data(), y.data(), arg.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_ChannelMoments(benchmark::State& s) {
  const auto c = static_cast<std::size_t>(s.range(0)), hw = static_cast<std::size_t>(s.range(1));
  const auto x = noise(4 * c * hw * hw, 1);
  std::vector<float> mean(c), var(c);
  for (auto _ : s) {
    if constexpr (Parallel) k::channel_moments(4, c, hw * hw, x.data(), mean.data(), var.data());
    else k::reference::channel_moments(4, c, hw * hw, x.data(), mean.data(), var.data());
    benchmark::DoNotOptimize(var.data());
  }
}

// Args: spatial size, 1 for the tiny widths, 0 for the default ones.
void BM_ModelForward(benchmark::State& s) {
  const auto hw = static_cast<std::size_t>(s.range(0));
  const ModelConfig cfg = s.range(1) ? ModelConfig::tiny(hw) : [&] {
    ModelConfig c;
    c.input_h = c.input_w = hw;
    return c;
  }();
  const auto params = build<float>(cfg, 1);
  Tensor<float> x(Shape{1, 3, hw, hw});
  const auto v = noise(x.numel(), 4);
  for (std::size_t i = 0; i < v.size(); ++i) x[i] = 0.5f + 0.5f * v[i];
  for (auto _ : s) {
    auto out = infer(params, x);
    benchmark::DoNotOptimize(out.mask.value().data().data());
  }
  s.counters["fps"] = benchmark::Counter(1.0, benchmark::Counter::kIsIterationInvariantRate);
}

void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({16, 64})->Args({64, 32})->Args({128, 16})->Unit(benchmark::kMicrosecond);
}

}  // namespace

BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardInput<true>)->Name("conv_backward_input/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardInput<false>)->Name("conv_backward_input/reference")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardWeight<true>)->Name("conv_backward_weight/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardWeight<false>)->Name("conv_backward_weight/reference")->Apply(conv_args);
BENCHMARK(BM_MaxPool<true>)->Name("maxpool/parallel")->Args({64, 64})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MaxPool<false>)->Name("maxpool/reference")->Args({64, 64})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ChannelMoments<true>)->Name("channel_moments/parallel")->Args({64, 32})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ChannelMoments<false>)->Name("channel_moments/reference")->Args({64, 32})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ModelForward)->Name("model_forward")->Args({64, 1})->Args({64, 0})->Args({128, 0})
    ->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
