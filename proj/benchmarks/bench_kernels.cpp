#include <benchmark/benchmark.h>

#include <random>

#include "egformer/attention.hpp"
#include "egformer/data.hpp"
#include "egformer/model.hpp"

using namespace egf;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(256);

void BM_EgMsa(benchmark::State& state) {
  const auto axis = state.range(0) ? Axis::kVertical : Axis::kHorizontal;
  const std::size_t h = 32, w = 64, c = 16;
  std::mt19937_64 rng(3);
  AttentionConfig cfg;
  cfg.heads = 4;
  cfg.head_dim = 4;
  const AngularGrid grid(h, w);
  const ErpeBias erpe = build_erpe(grid, axis, cfg);
  const BlockParams p = BlockParams::init(c, rng);
  const Tensor z = random_tensor({h, w, c}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(eg_msa(z, axis, erpe, p, cfg));
}
BENCHMARK(BM_EgMsa)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_BlockForwardBackward(benchmark::State& state) {
  const std::size_t h = 16, w = 32, c = 16;
  std::mt19937_64 rng(5);
  AttentionConfig cfg;
  cfg.heads = 4;
  cfg.head_dim = 4;
  const AngularGrid grid(h, w);
  const TransformerBlock block = TransformerBlock::init(BlockKind::kE, c, rng);
  const Tensor z = random_tensor({h, w, c}, 6);
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = sum_all(block_forward(z, block, grid, cfg));
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_BlockForwardBackward)->Unit(benchmark::kMillisecond);

void BM_ModelForward(benchmark::State& state) {
  const DepthModel model{ModelConfig{}};
  const Tensor img = random_tensor({32, 64, 3}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(img));
}
BENCHMARK(BM_ModelForward)->Unit(benchmark::kMillisecond);

void BM_Render(benchmark::State& state) {
  const SceneSpec scene = random_scene(8);
  for (auto _ : state) benchmark::DoNotOptimize(render(scene, 32, 64));
  state.SetItemsProcessed(state.iterations() * 32 * 64);
}
BENCHMARK(BM_Render)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
