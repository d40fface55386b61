#include <benchmark/benchmark.h>

#include "hessdiag/config.hpp"
#include "hessdiag/rng.hpp"
#include "hessdiag/spectral.hpp"

using namespace hessdiag;

namespace {

struct Setup {
  Model model;
  DiagnosticBatch batch;
};

Setup setup(ModelKind kind, int batch_size) {
  const RunConfig c = default_run_config(kind);
  Setup s{build_model(c.model), {}};
  const auto data = gen_dataset(data_spec(c), c.seeds.data);
  s.batch = make_diagnostic_batch(data.train, static_cast<std::size_t>(batch_size), c.seeds.diagnostic);
  return s;
}

ModelKind kind_of(int64_t i) { return static_cast<ModelKind>(i); }

void BM_Gradient(benchmark::State& state) {
  const auto s = setup(kind_of(state.range(0)), static_cast<int>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(gradient(s.model.objective, s.model.params, s.batch.batch()));
  state.SetLabel(to_string(s.model.config.kind));
}

void BM_Hvp(benchmark::State& state) {
  const auto s = setup(kind_of(state.range(0)), static_cast<int>(state.range(1)));
  HvpEngine eng(s.model.objective, s.model.params, s.batch.batch());
  FlatVector v(s.model.params.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = rng::normal(3, i);
  for (auto _ : state) benchmark::DoNotOptimize(eng.apply(v));
  state.SetLabel(to_string(s.model.config.kind));
}

void BM_Lanczos(benchmark::State& state) {
  const auto s = setup(kind_of(state.range(0)), 64);
  HvpEngine eng(s.model.objective, s.model.params, s.batch.batch());
  const auto& [group, idx] = s.model.registry.groups().front();
  const HvpClosure op = group_restricted_hvp(eng, idx);
  for (auto _ : state) benchmark::DoNotOptimize(lanczos_extreme(op, kDefaultLanczosIters, kDefaultLanczosTol, 1));
  state.SetLabel(to_string(s.model.config.kind) + "/" + group);
}

void BM_Hutchinson(benchmark::State& state) {
  const auto s = setup(ModelKind::kSelfAttention, 64);
  HvpEngine eng(s.model.objective, s.model.params, s.batch.batch());
  const HvpClosure op = group_restricted_hvp(eng, s.model.registry.groups().front().second);
  for (auto _ : state) benchmark::DoNotOptimize(hutchinson_trace(op, static_cast<int>(state.range(0)), 11));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_DenseSpectrum(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  DenseMatrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) a(i, j) = a(j, i) = rng::normal(5, i * n + j);
  for (auto _ : state) benchmark::DoNotOptimize(exact_spectrum(a));
}

}  // namespace

BENCHMARK(BM_Gradient)->ArgsProduct({{0, 1, 2}, {16, 64}})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Hvp)->ArgsProduct({{0, 1, 2}, {16, 64}})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Lanczos)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Hutchinson)->Arg(64)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DenseSpectrum)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
