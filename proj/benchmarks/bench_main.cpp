#include <benchmark/benchmark.h>

#include <random>

#include "ucil/eval.hpp"
#include "ucil/objective.hpp"
#include "ucil/ot_assign.hpp"

using namespace ucil;

namespace {

Matrix unit_rows(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  m.rowwise().normalize();
  return m;
}

void BM_Sinkhorn(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const auto r = state.range(0), n = state.range(1);
  const auto protos = init_prototypes(static_cast<int>(r), 128, 2);
  const Matrix lp = log_posterior(unit_rows(rng, n, 128), protos);
  for (auto _ : state) benchmark::DoNotOptimize(sinkhorn_balanced(lp, 0.05, 3));
  state.SetItemsProcessed(state.iterations() * r * n);
}
BENCHMARK(BM_Sinkhorn)->Args({50, 128})->Args({1000, 512})->Unit(benchmark::kMicrosecond);

// One desk-scale batch: d = 128, hidden 768, 128-dim head, 10 old + 5 new classes, replay of 75.
void BM_ObjectiveWithGrads(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const int n = static_cast<int>(state.range(0)), r = static_cast<int>(state.range(1)), d = 128;
  const Matrix z = unit_rows(rng, n, d);
  const auto protos = init_prototypes(r, d, 4, &z);
  const Matrix targets = to_per_sample_targets(sinkhorn_balanced(log_posterior(z, protos), 0.05, 3));
  const auto projector = init_projector(d, 768, 128, 5);
  ClassCenters centers;
  centers.add_session(10, 128, 6);
  const auto current = centers.add_session(5, 128, 7);
  ReplaySet replay;
  replay.features = unit_rows(rng, 75, d);
  for (int i = 0; i < 75; ++i) replay.labels.push_back(i % 10);
  const ObjectiveWeights w;
  for (auto _ : state)
    benchmark::DoNotOptimize(objective_with_grads(protos, projector, centers, {z, targets, &replay, current}, w));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_ObjectiveWithGrads)->Args({128, 50})->Args({512, 1000})->Unit(benchmark::kMillisecond);

void BM_Hungarian(benchmark::State& state) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto k = state.range(0);
  Matrix cost(k, k);
  for (Eigen::Index i = 0; i < cost.size(); ++i) cost.data()[i] = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(hungarian(cost));
  state.SetComplexityN(k);
}
BENCHMARK(BM_Hungarian)->RangeMultiplier(4)->Range(8, 512)->Complexity(benchmark::oNCubed);

}  // namespace

BENCHMARK_MAIN();
