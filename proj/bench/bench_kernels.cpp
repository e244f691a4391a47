// SPDX-License-Identifier: Apache-2.0
// Parallel kernels against the serial reference at the default model's
// shapes: 1280 tokens (5 chunks of 16x16), width 128.
#include <benchmark/benchmark.h>

#include <vector>

#include "vrgbx/dit_model.hpp"
#include "vrgbx/kernels.hpp"
#include "vrgbx/rng.hpp"

namespace k = vrgbx::kernels;

namespace {

constexpr int kTokens = 1280;
constexpr int kWidth = 128;

std::vector<float> random_vector(std::size_t n, std::uint64_t seed) {
    vrgbx::Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
    const int m = kTokens;
    const int n = static_cast<int>(state.range(0));
    const int kk = kWidth;
    const auto a = random_vector(static_cast<std::size_t>(m) * kk, 1);
    const auto b = random_vector(static_cast<std::size_t>(kk) * n, 2);
    std::vector<float> c(static_cast<std::size_t>(m) * n);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::gemm<float>(false, false, m, n, kk, 1.f, a.data(), kk, b.data(), n, 0.f, c.data(), n);
        else
            k::reference::gemm<float>(false, false, m, n, kk, 1.f, a.data(), kk, b.data(), n, 0.f, c.data(), n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2LL * m * n * kk);
}

template <bool Parallel>
void BM_AttentionScores(benchmark::State& state) {
    // Q K^T for one head followed by a row softmax.
    const int head = 32;
    const auto q = random_vector(static_cast<std::size_t>(kTokens) * head, 3);
    const auto key = random_vector(static_cast<std::size_t>(kTokens) * head, 4);
    std::vector<float> s(static_cast<std::size_t>(kTokens) * kTokens);
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::gemm<float>(false, true, kTokens, kTokens, head, 0.17f, q.data(), head, key.data(), head, 0.f, s.data(), kTokens);
            k::softmax_rows<float>(s.data(), kTokens, kTokens);
        } else {
            k::reference::gemm<float>(false, true, kTokens, kTokens, head, 0.17f, q.data(), head, key.data(), head, 0.f,
                                      s.data(), kTokens);
            k::reference::softmax_rows<float>(s.data(), kTokens, kTokens);
        }
        benchmark::DoNotOptimize(s.data());
    }
}

template <bool Parallel>
void BM_LayerNorm(benchmark::State& state) {
    const auto x = random_vector(static_cast<std::size_t>(kTokens) * kWidth, 5);
    std::vector<float> y(x.size()), mean(kTokens), rstd(kTokens);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::layer_norm_forward<float>(x.data(), kTokens, kWidth, 1e-6f, y.data(), mean.data(), rstd.data());
        else
            k::reference::layer_norm_forward<float>(x.data(), kTokens, kWidth, 1e-6f, y.data(), mean.data(), rstd.data());
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void BM_Gelu(benchmark::State& state) {
    const long n = static_cast<long>(kTokens) * 4 * kWidth;
    const auto x = random_vector(static_cast<std::size_t>(n), 6);
    std::vector<float> y(x.size());
    for (auto _ : state) {
        if constexpr (Parallel)
            k::gelu_forward<float>(x.data(), y.data(), n);
        else
            k::reference::gelu_forward<float>(x.data(), y.data(), n);
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void BM_ColumnSums(benchmark::State& state) {
    const auto x = random_vector(static_cast<std::size_t>(kTokens) * 3 * kWidth, 7);
    std::vector<float> out(3 * kWidth);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::accumulate_column_sums<float>(x.data(), kTokens, 3 * kWidth, out.data());
        else
            k::reference::accumulate_column_sums<float>(x.data(), kTokens, 3 * kWidth, out.data());
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_DiTForward(benchmark::State& state) {
    vrgbx::ModelConfig c;  // default toy config
    vrgbx::DiT<float> model(c);
    vrgbx::ModelInput<float> in;
    in.z = vrgbx::Tensor({c.chunks(), c.input_channels(), c.latent_height(), c.latent_width()});
    vrgbx::Rng rng(8);
    rng.fill_normal(in.z.span());
    in.t = 0.5f;
    in.plan.assign(c.frames, vrgbx::ModalityId::Albedo);
    for (auto _ : state) benchmark::DoNotOptimize(model.forward(in));
}

}  // namespace

BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(128)->Arg(512);
BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Arg(128)->Arg(512);
BENCHMARK(BM_AttentionScores<true>)->Name("attention_scores/parallel");
BENCHMARK(BM_AttentionScores<false>)->Name("attention_scores/reference");
BENCHMARK(BM_LayerNorm<true>)->Name("layer_norm/parallel");
BENCHMARK(BM_LayerNorm<false>)->Name("layer_norm/reference");
BENCHMARK(BM_Gelu<true>)->Name("gelu/parallel");
BENCHMARK(BM_Gelu<false>)->Name("gelu/reference");
BENCHMARK(BM_ColumnSums<true>)->Name("column_sums/parallel");
BENCHMARK(BM_ColumnSums<false>)->Name("column_sums/reference");
BENCHMARK(BM_DiTForward)->Name("dit_forward/default_config")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
