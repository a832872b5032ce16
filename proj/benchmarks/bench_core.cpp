#include <benchmark/benchmark.h>

#include "xfake/evaluator.hpp"
#include "xfake/harness.hpp"
#include "xfake/nn.hpp"
#include "xfake/rng.hpp"
#include "xfake/synth.hpp"
#include "xfake/tensor.hpp"

using namespace xfake;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(0.0, 1.0);
    return t;
}

EvaluatorModel make_model(EvaluatorVariant variant, int input_size) {
    EvaluatorModelConfig cfg;
    cfg.variant = variant;
    cfg.input_size = input_size;
    cfg.class_names = {"a", "b", "c", "d"};
    return EvaluatorModel::create(cfg, 1);
}

void bm_conv2d_forward(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    Rng rng(7);
    nn::Conv2d conv(32, 16, 3, 2, 1, rng);
    const Var x = Var::leaf(random_tensor({8, 16, size, size}, 11));
    for (auto _ : state) benchmark::DoNotOptimize(conv.forward(x).value().data());
    state.SetItemsProcessed(state.iterations() * 8);
}

void bm_bayes_conv_forward(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    Rng init(7), noise(13);
    nn::BayesConv2d conv(32, 16, 3, 2, 1, init);
    const Var x = Var::leaf(random_tensor({8, 16, size, size}, 11));
    for (auto _ : state) benchmark::DoNotOptimize(conv.forward(x, noise).value().data());
    state.SetItemsProcessed(state.iterations() * 8);
}

void bm_predict_criteria_bbb(benchmark::State& state) {
    const int T = static_cast<int>(state.range(0));
    EvaluatorModel model = make_model(EvaluatorVariant::BBB, 28);
    const Tensor img = random_tensor({28, 28}, 3);
    Rng rng(5);
    for (auto _ : state) benchmark::DoNotOptimize(predict_criteria(model, img, T, rng).total_u);
}

void bm_predict_criteria_mcd(benchmark::State& state) {
    const int T = static_cast<int>(state.range(0));
    EvaluatorModel model = make_model(EvaluatorVariant::MCD, 28);
    const Tensor img = random_tensor({28, 28}, 3);
    Rng rng(5);
    for (auto _ : state) benchmark::DoNotOptimize(predict_criteria(model, img, T, rng).total_u);
}

void bm_ssim(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    const Tensor a = random_tensor({size, size}, 21);
    const Tensor b = random_tensor({size, size}, 22);
    for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
}

void bm_psnr(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    const Tensor a = random_tensor({size, size}, 21);
    const Tensor b = random_tensor({size, size}, 22);
    for (auto _ : state) benchmark::DoNotOptimize(psnr(a, b));
}

void bm_synth_render(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    const SynthGenerator gen(make_default_spec(4, size));
    uint64_t seed = 0;
    for (auto _ : state)
        benchmark::DoNotOptimize(gen.synth(static_cast<int>(seed) % 4, 37.0, ++seed).pixels.data());
}

void bm_corrupt_clutter(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    const SynthGenerator gen(make_default_spec(4, size));
    const TargetImage img = gen.synth(1, 37.0, 5);
    const CorruptionSpec spec{CorruptionKind::clutter_swap, 0.8};
    uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(gen.corrupt(img, spec, ++seed).pixels.data());
}

BENCHMARK(bm_conv2d_forward)->Arg(14)->Arg(28)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_bayes_conv_forward)->Arg(14)->Arg(28)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_predict_criteria_bbb)->Arg(10)->Arg(25)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_predict_criteria_mcd)->Arg(25)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_ssim)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_psnr)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_synth_render)->Arg(32)->Arg(96)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_corrupt_clutter)->Arg(32)->Arg(96)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
