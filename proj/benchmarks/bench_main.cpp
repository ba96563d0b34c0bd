#include <benchmark/benchmark.h>

#include <vector>

#include "promptdet/detector.hpp"
#include "promptdet/diffnum.hpp"
#include "promptdet/optim.hpp"
#include "promptdet/synthdata.hpp"

using namespace promptdet;

namespace {

DatasetSpec bench_spec() {
  DatasetSpec s = preset_spec("K-like");
  s.id = 0;
  return s;
}

void BM_GenerateFrame(benchmark::State& state) {
  const DatasetSpec spec = bench_spec();
  std::uint64_t seed = 1;
  for (auto _ : state) benchmark::DoNotOptimize(generate_frames(spec, seed++, 1));
}
BENCHMARK(BM_GenerateFrame);

void BM_Voxelize(benchmark::State& state) {
  const Detector det(desk_config(), 1);
  const auto frames = generate_frames(bench_spec(), 7, 1);
  for (auto _ : state) benchmark::DoNotOptimize(det.voxelize(frames[0]));
  state.counters["points"] = static_cast<double>(frames[0].points.size());
}
BENCHMARK(BM_Voxelize);

// 3x3 convolution on a square map, forward plus backward.
void BM_Conv2d(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  const std::size_t c = 16;
  const auto x = DiffTensor::random_normal({1, c, side, side}, 1.0, 1, true);
  const auto k = DiffTensor::random_normal({c, c, 3, 3}, 0.1, 2, true);
  const auto b = DiffTensor::random_normal({c}, 0.1, 3, true);
  for (auto _ : state) {
    const DiffTensor y = sum(conv2d(x, k, b, 1, 1));
    backward(y);
    benchmark::DoNotOptimize(y.item());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(side * side * c * c * 9));
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32)->Arg(64);

// One optimizer step on the desk profile: forward, backward, Adam.
void BM_TrainStep(benchmark::State& state) {
  Detector det(desk_config(), 1);
  const DatasetSpec spec = bench_spec();
  const auto frames = generate_frames(spec, 3, 2);
  const RangeMask mask = det.mask_for(spec);
  std::vector<VoxelGrid> grids;
  for (const auto& f : frames) grids.push_back(det.voxelize(f));
  const std::vector<BatchItem> batch{{&frames[0], &grids[0], &mask, 0}, {&frames[1], &grids[1], &mask, 0}};
  OptimizerState opt = make_optimizer_state(det.params(), 1e-3);
  for (auto _ : state) {
    det.params().zero_grad();
    const LossBreakdown loss = det.training_loss(batch);
    backward(loss.total);
    adam_step(det.params(), opt, 1e-3);
    benchmark::DoNotOptimize(loss.l_det);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
