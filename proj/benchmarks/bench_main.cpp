#include "convneur/dataset.hpp"
#include "convneur/memory.hpp"
#include "convneur/model.hpp"
#include "convneur/ops.hpp"
#include "convneur/rng.hpp"
#include "convneur/train.hpp"

#include <benchmark/benchmark.h>

using namespace convneur;

namespace {

Tensor uniform(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.data()) {
        v = rng.uniform(-1.0, 1.0);
    }
    return t;
}

void BM_DepthwiseConv7(benchmark::State& state) {
    const auto side = static_cast<std::size_t>(state.range(0));
    const Tensor x = uniform({32, side, side}, 1), k = uniform({32, 7, 7}, 2);
    for (auto _ : state) {
        Tape tape(false);
        benchmark::DoNotOptimize(depthwise_conv2d(tape.constant_ref(x), tape.constant_ref(k), 1, 3).value());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(32 * side * side * 49));
}
BENCHMARK(BM_DepthwiseConv7)->Arg(16)->Arg(32)->Arg(64);

void BM_DepthwiseConv7Backward(benchmark::State& state) {
    const auto side = static_cast<std::size_t>(state.range(0));
    Tensor x = uniform({32, side, side}, 1), k = uniform({32, 7, 7}, 2);
    for (auto _ : state) {
        Tape tape;
        Var y = depthwise_conv2d(tape.parameter(x), tape.parameter(k), 1, 3);
        tape.backward(sum(y));
        x.zero_grad();
        k.zero_grad();
    }
}
BENCHMARK(BM_DepthwiseConv7Backward)->Arg(16)->Arg(32);

void BM_PointwiseConv(benchmark::State& state) {
    const auto channels = static_cast<std::size_t>(state.range(0));
    const Tensor x = uniform({channels, 16, 16}, 3), w = uniform({4 * channels, channels}, 4);
    for (auto _ : state) {
        Tape tape(false);
        benchmark::DoNotOptimize(pointwise_conv(tape.constant_ref(x), tape.constant_ref(w)).value());
    }
}
BENCHMARK(BM_PointwiseConv)->Arg(16)->Arg(64);

// Memory branch cost should track HW, not the chunk length.
void BM_MemoryBranch(benchmark::State& state) {
    const auto side = static_cast<std::size_t>(state.range(0));
    MemoryConfig config;
    config.c_mem = 16;
    config.heads = 4;
    config.chunk_len = static_cast<std::size_t>(state.range(1));
    Rng rng(5);
    MemoryParams params = MemoryParams::init(32, config, rng);
    const Tensor x = uniform({32, side, side}, 6);
    for (auto _ : state) {
        Tape tape(false);
        benchmark::DoNotOptimize(memory_branch(tape.constant_ref(x), bind(tape, params), config).value());
    }
    state.SetComplexityN(static_cast<std::int64_t>(side * side));
}
BENCHMARK(BM_MemoryBranch)->Args({8, 16})->Args({16, 16})->Args({32, 16})->Args({32, 64})->Args({64, 16})->Args({64, 256})->Args({128, 16});

void BM_MicroForward(benchmark::State& state) {
    ModelConfig config = ModelConfig::preset("micro");
    config.placement = state.range(0) ? Placement::per_stage : Placement::none;
    Model model = Model::build(config, 7);
    const Tensor image = uniform({3, 32, 32}, 8);
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.predict_one(image));
    }
    state.SetLabel(placement_name(config.placement).data());
}
BENCHMARK(BM_MicroForward)->Arg(0)->Arg(1);

void BM_MicroTrainStep(benchmark::State& state) {
    ModelConfig config = ModelConfig::preset("micro");
    config.num_classes = 4;
    Model model = Model::build(config, 9);
    const Dataset data = synth_global_task(64, 32, 4, 10);
    TrainConfig tc;
    tc.batch = 16;
    tc.steps = 1000000;
    Trainer trainer(model, tc);
    for (auto _ : state) {
        benchmark::DoNotOptimize(trainer.train_step(data));
    }
}
BENCHMARK(BM_MicroTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
