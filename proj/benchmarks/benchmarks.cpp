// Microbenchmarks for the hot paths: convolutions, the separable Gaussian
// filter, full network passes, and the dice loss. Run with
//   ./build/benchmarks/volseg_bench [--benchmark_filter=...]

#include <benchmark/benchmark.h>

#include <utility>

#include "volseg/loss.hpp"
#include "volseg/nn_ops.hpp"
#include "volseg/phantom.hpp"
#include "volseg/preprocess.hpp"
#include "volseg/rng.hpp"
#include "volseg/tensor.hpp"
#include "volseg/vnet.hpp"
#include "volseg/volume.hpp"

namespace {

using namespace volseg;

Tensor random_tensor(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  float* p = t.mutable_data();
  for (int64_t i = 0; i < t.size(); ++i) p[i] = rng.uniform(-1.0f, 1.0f);
  return t;
}

void BM_Conv3dForward(benchmark::State& state) {
  const int64_t extent = state.range(0);
  Rng rng(1);
  ConvLayerParams p = ConvLayerParams::create(8, 8, 5, 1, rng);
  const Tensor x = random_tensor(Shape{8, extent, extent, extent}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv3d(x, p));
  }
}
BENCHMARK(BM_Conv3dForward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  const int64_t extent = state.range(0);
  Rng rng(2);
  ConvLayerParams p = ConvLayerParams::create(8, 8, 5, 1, rng);
  const Tensor x = random_tensor(Shape{8, extent, extent, extent}, rng);
  const Tensor up = random_tensor(Shape{8, extent, extent, extent}, rng);
  for (auto _ : state) {
    p.zero_grads();
    benchmark::DoNotOptimize(conv3d_backward(x, p, up));
  }
}
BENCHMARK(BM_Conv3dBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_DownConv(benchmark::State& state) {
  Rng rng(3);
  ConvLayerParams p = ConvLayerParams::create(16, 8, 2, 2, rng);
  const Tensor x = random_tensor(Shape{8, 32, 32, 32}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv3d(x, p));
  }
}
BENCHMARK(BM_DownConv)->Unit(benchmark::kMillisecond);

void BM_TransposedConv(benchmark::State& state) {
  Rng rng(4);
  ConvLayerParams p = ConvLayerParams::create(8, 16, 2, 2, rng);
  const Tensor x = random_tensor(Shape{16, 16, 16, 16}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(transposed_conv3d(x, p));
  }
}
BENCHMARK(BM_TransposedConv)->Unit(benchmark::kMillisecond);

void BM_GaussianFilter(benchmark::State& state) {
  const int64_t extent = state.range(0);
  Rng rng(5);
  VolumeImage v;
  v.data = random_tensor(Shape{1, extent, extent, extent}, rng);
  v.modalities = {Modality::T1};
  const GaussianSpec spec(1.0f);
  for (auto _ : state) {
    benchmark::DoNotOptimize(gaussian_filter3d(v, spec));
  }
}
BENCHMARK(BM_GaussianFilter)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_NormalizeIntensity(benchmark::State& state) {
  PhantomSpec spec;
  spec.extent = 64;
  spec.modalities = 2;
  spec.seed = 6;
  const VolumeImage image = generate_phantom(spec).first;
  for (auto _ : state) {
    benchmark::DoNotOptimize(normalize_intensity(image));
  }
}
BENCHMARK(BM_NormalizeIntensity)->Unit(benchmark::kMillisecond);

void BM_VNetForward(benchmark::State& state) {
  const int64_t extent = state.range(0);
  VNetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_channels = extent == 16 ? 2 : 4;
  cfg.num_classes = 2;
  cfg.input_extent = extent;
  VNetModel model = build_model(cfg, 7);
  Rng rng(8);
  const Tensor x = random_tensor(Shape{2, extent, extent, extent}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward(model, x));
  }
}
BENCHMARK(BM_VNetForward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_VNetForwardBackward(benchmark::State& state) {
  const int64_t extent = state.range(0);
  VNetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_channels = extent == 16 ? 2 : 4;
  cfg.num_classes = 2;
  cfg.input_extent = extent;
  VNetModel model = build_model(cfg, 9);
  Rng rng(10);
  const Tensor x = random_tensor(Shape{2, extent, extent, extent}, rng);
  const Tensor up =
      random_tensor(Shape{2, extent, extent, extent}, rng);
  for (auto _ : state) {
    zero_grads(model);
    const Tensor logits = forward(model, x, true);
    benchmark::DoNotOptimize(backward(model, up));
    model.tape.reset();
  }
}
BENCHMARK(BM_VNetForwardBackward)
    ->Arg(16)
    ->Arg(32)
    ->Unit(benchmark::kMillisecond);

void BM_SoftDiceLoss(benchmark::State& state) {
  PhantomSpec spec;
  spec.extent = 32;
  spec.modalities = 1;
  spec.seed = 11;
  const LabelMap label = generate_phantom(spec).second;
  Rng rng(12);
  const Tensor logits = random_tensor(Shape{2, 32, 32, 32}, rng);
  const Tensor probs = softmax_voxelwise(logits);
  for (auto _ : state) {
    benchmark::DoNotOptimize(soft_dice_loss(probs, label));
  }
}
BENCHMARK(BM_SoftDiceLoss)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
