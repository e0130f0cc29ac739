#include <benchmark/benchmark.h>

#include <vector>

#include "hm/autodiff.hpp"
#include "hm/features.hpp"
#include "hm/model.hpp"
#include "hm/rng.hpp"
#include "hm/uncertainty.hpp"

using namespace hm;

namespace {

features::FeatureMap random_map(std::uint64_t seed) {
  CounterRng rng(seed);
  features::FeatureMap f{128, 241, std::vector<float>(128 * 241)};
  for (auto& v : f.values) v = static_cast<float>(rng.normal());
  return f;
}

void BM_MelSpectrogram(benchmark::State& state) {
  CounterRng rng(1);
  std::vector<double> s(12000);
  for (auto& x : s) x = 0.3 * rng.normal();
  const features::MelSpectrogram mel;
  for (auto _ : state) benchmark::DoNotOptimize(mel.compute(s));
}
BENCHMARK(BM_MelSpectrogram)->Unit(benchmark::kMillisecond);

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  CounterRng rng(2);
  std::vector<ad::Real> a(n * n), b(n * n);
  for (auto& x : a) x = static_cast<ad::Real>(rng.normal());
  for (auto& x : b) x = static_cast<ad::Real>(rng.normal());
  const auto ta = ad::Tensor::from({n, n}, a), tb = ad::Tensor::from({n, n}, b);
  ad::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(ad::matmul(ta, tb));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_DeskForward(benchmark::State& state) {
  const model::Model m(model::ModelConfig::desk(), 1);
  std::vector<features::FeatureMap> maps;
  for (std::int64_t i = 0; i < state.range(0); ++i) maps.push_back(random_map(static_cast<std::uint64_t>(i)));
  for (auto _ : state) benchmark::DoNotOptimize(m.predict_logits(maps, model::RunMode::eval()));
}
BENCHMARK(BM_DeskForward)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_DeskTrainStep(benchmark::State& state) {
  model::Model m(model::ModelConfig::desk(), 1);
  std::vector<features::FeatureMap> maps;
  for (std::uint64_t i = 0; i < 16; ++i) maps.push_back(random_map(i));
  const auto x = model::to_batch(maps);
  std::vector<std::uint64_t> seeds(16);
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = i;
  for (auto _ : state) {
    for (auto& p : m.parameters()) p.tensor.zero_grad();
    ad::sum(m.forward(x, model::RunMode::train(seeds, 0))).backward();
  }
}
BENCHMARK(BM_DeskTrainStep)->Unit(benchmark::kMillisecond);

void BM_McPredict(benchmark::State& state) {
  const model::Model m(model::ModelConfig::desk(), 1);
  const auto f = random_map(3);
  for (auto _ : state) benchmark::DoNotOptimize(uncertainty::mc_predict(m, f, 30, 7));
}
BENCHMARK(BM_McPredict)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
