#include <benchmark/benchmark.h>

#include <random>

#include "promptlab/mer.hpp"
#include "promptlab/peft.hpp"
#include "promptlab/trainer.hpp"

using namespace promptlab;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Tensor t = Tensor::matrix(rows, cols);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

AdapterSpec spec(Method m) {
  AdapterSpec s;
  s.method = m;
  s.n_enc = s.n_dec = 16;
  s.n_deep = 8;
  return s;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, n, 1);
  const Tensor b = random_matrix(n, n, 2);
  for (auto _ : state) {
    Graph g(false);
    benchmark::DoNotOptimize(matmul(g.constant(a), g.constant(b)).value().data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_ForwardBackward(benchmark::State& state) {
  const auto m = static_cast<Method>(state.range(0));
  AttachedAdapter a = attach(build_model(ModelConfig::toy()), spec(m));
  const Tensor x = random_matrix(24, ModelConfig::toy().d_feat, 3);
  const std::vector<int> y{1, 2, 20, 21, 22, 23, 40, 41, 5, 6, 7, 8};
  for (auto _ : state) {
    Graph g;
    Var loss = a.model().utterance_nll(g, x, "A", y, &a).first;
    g.backward(loss);
  }
  state.SetLabel(to_string(m));
}
BENCHMARK(BM_ForwardBackward)
    ->Arg(static_cast<int>(Method::FFT))
    ->Arg(static_cast<int>(Method::LoRA))
    ->Arg(static_cast<int>(Method::VanillaSPT))
    ->Arg(static_cast<int>(Method::SPT4ASR))
    ->Unit(benchmark::kMillisecond);

void BM_GreedyDecode(benchmark::State& state) {
  AttachedAdapter a = attach(build_model(ModelConfig::toy()), spec(Method::VanillaSPT));
  const Tensor x = random_matrix(24, ModelConfig::toy().d_feat, 4);
  for (auto _ : state) benchmark::DoNotOptimize(a.transcribe(x, "A", 32));
}
BENCHMARK(BM_GreedyDecode)->Unit(benchmark::kMillisecond);

void BM_AlignUnits(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> pick(0, 5);
  std::vector<MerUnit> ref, hyp;
  for (std::size_t i = 0; i < n; ++i) ref.push_back({"A", {pick(rng)}});
  for (std::size_t i = 0; i < n; ++i) hyp.push_back({"A", {pick(rng)}});
  for (auto _ : state) benchmark::DoNotOptimize(count_edits(align_units(ref, hyp)));
}
BENCHMARK(BM_AlignUnits)->Arg(16)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
