#include <benchmark/benchmark.h>

#include <random>

#include "hiddentask/attacks.hpp"
#include "hiddentask/autodiff.hpp"
#include "hiddentask/data.hpp"
#include "hiddentask/model.hpp"
#include "hiddentask/training.hpp"

namespace ht = hiddentask;

namespace {

ht::Tensor random_tensor(ht::Shape shape, double lo, double hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ht::Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

ht::MultiTaskModel benchmark_model() {
  ht::BackboneConfig b;
  b.input_shift = 127.5;
  b.input_scale = 1.0 / 16.0;
  return ht::MultiTaskModel::create(b, {}, {{"A", 2, 1.0}, {"B", 2, 1.0}, {"C", 2, 1.0}}, 1);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const ht::Tensor a = random_tensor({n, n}, -1, 1, 1);
  const ht::Tensor b = random_tensor({n, n}, -1, 1, 2);
  for (auto _ : state) {
    ht::Tape tape;
    benchmark::DoNotOptimize(ht::ops::matmul(tape.constant(a), tape.constant(b)).value().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_ForwardBackward(benchmark::State& state) {
  const auto m = benchmark_model();
  const auto n = static_cast<std::size_t>(state.range(0));
  const ht::Tensor x = random_tensor({n, 32}, 0, 255, 3);
  const ht::TaskLabels labels{{"A", std::vector<std::size_t>(n, 0)}, {"B", std::vector<std::size_t>(n, 1)},
                              {"C", std::vector<std::size_t>(n, 0)}};
  const std::vector<std::string> tasks{"A", "B", "C"};
  for (auto _ : state) {
    ht::Tape tape;
    ht::TracedModel traced(tape, m, true, true);
    auto g = tape.backward(ht::ops::mean(ht::multitask_loss(traced, traced.backbone().features(tape.constant(x)), labels, tasks)));
    benchmark::DoNotOptimize(g);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_ForwardBackward)->Arg(64)->Arg(256);

void BM_CfDeltaAttack(benchmark::State& state) {
  const auto m = benchmark_model();
  const auto attacker = m.without_task("A");
  const ht::Backbone forgotten = ht::make_backbone(m.backbone().config, 9);
  const ht::Tensor x = random_tensor({100, 32}, 0, 255, 4);
  const ht::TaskLabels labels{{"B", std::vector<std::size_t>(100, 1)}, {"C", std::vector<std::size_t>(100, 0)}};
  ht::AttackConfig cfg;
  cfg.gamma = 1;
  cfg.iterations = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(ht::cf_delta_attack(attacker, forgotten, x, &labels, cfg));
  state.SetItemsProcessed(state.iterations() * 100);
}
BENCHMARK(BM_CfDeltaAttack)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_TrainEpoch(benchmark::State& state) {
  auto data_cfg = ht::SyntheticConfig::benchmark();
  data_cfg.num_samples = 2000;
  const auto data = ht::generate_synthetic(data_cfg);
  ht::TrainConfig cfg;
  cfg.epochs = 1;
  for (auto _ : state) {
    auto m = benchmark_model();
    benchmark::DoNotOptimize(ht::train_multitask(m, ht::full_view(data), {"A", "B", "C"}, cfg));
  }
  state.SetItemsProcessed(state.iterations() * 2000);
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
