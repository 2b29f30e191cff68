#include <benchmark/benchmark.h>

#include "micl/linalg.hpp"
#include "micl/rng.hpp"
#include "micl/tensor.hpp"

namespace {

micl::Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    micl::Rng rng(seed);
    micl::Tensor m({r, c});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform(-1.0, 1.0);
    return m;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const micl::Tensor a = random_matrix(n, n, 1);
    const micl::Tensor b = random_matrix(n, n, 2);
    for (auto _ : state) {
        micl::Tensor c = micl::matmul(a, b);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_RowSoftmax(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const micl::Tensor m = random_matrix(n, n, 3);
    for (auto _ : state) {
        micl::Tensor s = micl::row_softmax(m);
        benchmark::DoNotOptimize(s.data());
    }
}
BENCHMARK(BM_RowSoftmax)->Arg(256)->Arg(512);

void BM_Svd(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const micl::Tensor m = random_matrix(n, n, 4);
    for (auto _ : state) {
        micl::SvdResult s = micl::svd(m);
        benchmark::DoNotOptimize(s.sigma.data());
    }
}
BENCHMARK(BM_Svd)->Arg(16)->Arg(64);

}  // namespace
