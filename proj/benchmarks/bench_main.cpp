#include "htlab/losses.hpp"
#include "htlab/model.hpp"
#include "htlab/optim.hpp"

#include <benchmark/benchmark.h>

using namespace htlab;

namespace {

MlpSpec reference_spec(bool bn) {
  MlpSpec s;
  s.layer_widths = {16, 64, 64, 10};
  s.use_batchnorm = bn;
  return s;
}

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = rng.normal();
  return m;
}

Dataset blobs(std::size_t classes, std::size_t per_class, std::size_t dim) {
  Rng rng(5);
  Dataset d;
  d.num_classes = classes;
  d.x = gaussian(rng, classes * per_class, dim);
  for (std::size_t i = 0; i < d.x.rows(); ++i) {
    d.y.push_back(i % classes);
    d.x(i, i % classes % dim) += 4.0;
  }
  return d;
}

void BM_Forward(benchmark::State& state) {
  Rng rng(1);
  const ModelParams p = init_model(reference_spec(state.range(1) != 0), rng);
  const Matrix x = gaussian(rng, static_cast<std::size_t>(state.range(0)), 16);
  for (auto _ : state) benchmark::DoNotOptimize(forward(p, x, Mode::train));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->ArgsProduct({{32, 512}, {0, 1}});

void BM_ForwardBackward(benchmark::State& state) {
  Rng rng(1);
  const ModelParams p = init_model(reference_spec(state.range(1) != 0), rng);
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix x = gaussian(rng, n, 16);
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = i % 10;
  for (auto _ : state) {
    const auto tr = forward(p, x, Mode::train);
    const auto ce = cross_entropy(tr.logits, y);
    benchmark::DoNotOptimize(backward(p, tr, ce.grad, nullptr, FreezeMask::all_trainable()));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->ArgsProduct({{32, 512}, {0, 1}});

void BM_RankReg(benchmark::State& state) {
  Rng rng(2);
  const Matrix z = gaussian(rng, 32, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(rank_reg(z));
}
BENCHMARK(BM_RankReg)->Arg(16)->Arg(64)->Arg(256);

void BM_TopSingularValues(benchmark::State& state) {
  Rng rng(3);
  const Matrix z = gaussian(rng, 400, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(top_singular_values(z, 20));
}
BENCHMARK(BM_TopSingularValues)->Arg(64)->Arg(256);

void BM_LolsgdRound(benchmark::State& state) {
  const Dataset data = blobs(6, 60, 16);
  Rng rng(4);
  const ModelParams p0 = init_model(reference_spec(false), rng);
  const SgdConfig sgd;
  LolConfig lol;
  lol.jobs = static_cast<std::size_t>(state.range(0));
  std::size_t round = 0;
  for (auto _ : state) {
    ModelParams p = p0;
    benchmark::DoNotOptimize(
        lolsgd_round(p, data, Objective{}, sgd, lol, FreezeMask::all_trainable(), Rng(9), round++));
  }
}
BENCHMARK(BM_LolsgdRound)->Arg(1)->Arg(4)->UseRealTime();

void BM_SgdEpoch(benchmark::State& state) {
  const Dataset data = blobs(6, 60, 16);
  Rng rng(4);
  const ModelParams p0 = init_model(reference_spec(false), rng);
  SgdConfig sgd;
  sgd.epochs = 1;
  for (auto _ : state) {
    ModelParams p = p0;
    benchmark::DoNotOptimize(
        train_sgd(p, data, Objective{}, sgd, FreezeMask::all_trainable(), Rng(9)));
  }
}
BENCHMARK(BM_SgdEpoch);

}  // namespace

BENCHMARK_MAIN();
