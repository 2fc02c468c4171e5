#include <benchmark/benchmark.h>

#include "volflow/flow/model.hpp"
#include "volflow/pipeline.hpp"
#include "volflow/training.hpp"

using namespace volflow;

namespace {

Tensor4<double> random_patch(std::uint32_t edge, std::uint64_t seed) {
    Tensor4<double> t(1, edge, edge, edge);
    Rng rng(seed);
    for (auto& v : t.v) v = rng.uniform(-0.5, 0.5);
    return t;
}

FlowModel<double> desk_model() {
    FlowConfig cfg;
    cfg.levels = 2;
    cfg.flows = 4;
    cfg.patch_edge = 16;
    cfg.in_channels = 1;
    cfg.coupling_hidden = 32;
    FlowModel<double> m(cfg, InitMode::Random, 1);
    Rng rng(2);
    std::vector<Tensor4<double>> init;
    for (int i = 0; i < 4; ++i) {
        Tensor4<double> t(1, 16, 16, 16);
        for (auto& v : t.v) v = rng.uniform(-0.5, 0.5);
        init.push_back(std::move(t));
    }
    m.init_actnorm(init);
    return m;
}

void bm_conv3d_forward(benchmark::State& state) {
    const auto cin = std::uint32_t(state.range(0));
    const auto cout = std::uint32_t(state.range(1));
    const auto edge = std::uint32_t(state.range(2));
    Rng rng(3);
    auto p = conv3d_he<double>(cin, cout, 3, rng);
    Tensor4<double> x(cin, edge, edge, edge);
    for (auto& v : x.v) v = rng.uniform(-1.0, 1.0);
    Tensor4<double> y;
    for (auto _ : state) {
        conv3d_forward(p, x, y);
        benchmark::DoNotOptimize(y.v.data());
    }
}
BENCHMARK(bm_conv3d_forward)->Args({4, 32, 8})->Args({16, 32, 4})->Args({32, 32, 4});

void bm_model_forward(benchmark::State& state) {
    auto m = desk_model();
    auto x = random_patch(16, 4);
    for (auto _ : state) {
        double ld = 0;
        auto z = m.forward(x, ld);
        benchmark::DoNotOptimize(ld);
        benchmark::DoNotOptimize(z.tensors.data());
    }
}
BENCHMARK(bm_model_forward);

void bm_model_log_prob(benchmark::State& state) {
    auto m = desk_model();
    auto x = random_patch(16, 5);
    for (auto _ : state) {
        auto d = m.log_prob(x);
        benchmark::DoNotOptimize(d.nats);
    }
}
BENCHMARK(bm_model_log_prob);

void bm_batch_grad(benchmark::State& state) {
    auto m = desk_model();
    std::vector<Tensor4<double>> batch;
    for (int i = 0; i < 10; ++i) batch.push_back(random_patch(16, 10 + i));
    for (auto _ : state) {
        auto grads = zeros_like(m.params);
        auto res = nll_loss_and_grad(m, batch, grads, 1);
        benchmark::DoNotOptimize(res.bits_per_dim);
    }
}
BENCHMARK(bm_batch_grad)->Unit(benchmark::kMillisecond);

void bm_aggregate_map(benchmark::State& state) {
    const Dims dims{64, 64, 64};
    const GridSpec grid{16, 10};
    Rng rng(6);
    std::vector<PatchScore> scores;
    for (const auto& o : inference_grid(dims, grid))
        scores.push_back({o, rng.uniform(-9.0, -1.0)});
    for (auto _ : state) {
        auto map = aggregate_map(scores, dims, grid, 2.0);
        benchmark::DoNotOptimize(map.values.data());
    }
}
BENCHMARK(bm_aggregate_map)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
