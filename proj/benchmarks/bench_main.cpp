#include <benchmark/benchmark.h>

#include "sib/ops.hpp"
#include "sib/rng.hpp"
#include "sib/selfcheck.hpp"
#include "sib/sibcore.hpp"
#include "sib/trainer.hpp"

using namespace sib;

namespace {

ad::Tensor random_matrix(CounterRng& rng, std::size_t r, std::size_t c) {
  std::vector<double> v(r * c);
  for (double& x : v) x = rng.normal();
  return ad::Tensor::matrix(r, c, v);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  CounterRng rng(1);
  const auto a = random_matrix(rng, n, n);
  const auto b = random_matrix(rng, n, n);
  for (auto _ : state) benchmark::DoNotOptimize(ad::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  CounterRng rng(2);
  const auto a0 = random_matrix(rng, n, n);
  const auto b = random_matrix(rng, n, n);
  for (auto _ : state) {
    ad::Tape tape;
    const auto a = tape.leaf(a0);
    benchmark::DoNotOptimize(tape.backward(ad::sum(ad::tanh(ad::matmul(a, b)))));
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(16)->Arg(64);

// Forward construction of theta^K for one 5-way episode, K inner steps.
void BM_Unroll(benchmark::State& state) {
  const MetaModel model = perturbed_model(ModelSpec::fewshot(5, 16, 16), 3);
  const ModelView view = bind_constant(model);
  const Episode ep = small_classification_episode(5, 16, 75, 4);
  InferenceConfig cfg;
  cfg.init = InitMethod::Prototype;
  cfg.inner.kl_in_inner = true;
  cfg.inner.steps = static_cast<std::size_t>(state.range(0));
  const auto task = adaptation_input(ep);
  for (auto _ : state) benchmark::DoNotOptimize(build_posterior(task, view, cfg, zero_noise()).theta);
}
BENCHMARK(BM_Unroll)->Arg(0)->Arg(3)->Arg(10);

// Objective and outer gradient through the unrolled loop for one batch.
void BM_TrainStep(benchmark::State& state) {
  RunConfig cfg = default_config(state.range(0) == 0 ? TaskMode::Toy : TaskMode::FewShot);
  const MetaModel model = MetaModel::create(cfg.model_spec(), 0);
  const EpisodeSource src(cfg);
  std::vector<Episode> batch;
  std::vector<std::uint64_t> keys;
  for (std::size_t i = 0; i < cfg.batch_tasks; ++i) {
    batch.push_back(src.get(Split::Train, i));
    keys.push_back(i + 1);
  }
  for (auto _ : state) benchmark::DoNotOptimize(batch_gradient(model, cfg, batch, keys));
  state.SetLabel(state.range(0) == 0 ? "toy" : "fewshot");
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1);

void BM_Gradcheck(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(gradcheck_suite());
}
BENCHMARK(BM_Gradcheck)->Unit(benchmark::kMillisecond)->Iterations(1);

}  // namespace

BENCHMARK_MAIN();
