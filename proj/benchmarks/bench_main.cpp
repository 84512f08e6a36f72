#include <benchmark/benchmark.h>

#include <memory>
#include <vector>

#include "sgfn/certify.hpp"
#include "sgfn/env.hpp"
#include "sgfn/losses.hpp"
#include "sgfn/oracle.hpp"
#include "sgfn/policy.hpp"
#include "sgfn/trainer.hpp"

using namespace sgfn;

namespace {

PolicyModel mlp_model(const DagEnv& env, std::size_t hidden) {
  ModelSpec spec;
  spec.kind = "mlp";
  spec.hidden = hidden;
  Rng rng(1);
  return PolicyModel::create(env, spec, rng);
}

void BM_MlpForward(benchmark::State& state) {
  const auto hidden = static_cast<std::size_t>(state.range(0));
  Hypergrid env(2, 8, 0.1, 0.5, 2.0);
  const auto model = mlp_model(env, hidden);
  std::vector<StateId> states(env.num_grid_points());
  for (std::size_t s = 0; s < states.size(); ++s) states[s] = static_cast<StateId>(s);
  const auto params = model.params.slice("forward");
  for (auto _ : state) benchmark::DoNotOptimize(model.forward_head->evaluate(params, env, states));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(states.size()));
}
BENCHMARK(BM_MlpForward)->Arg(64)->Arg(256);

void BM_SampleForwardBatch(benchmark::State& state) {
  Hypergrid env(2, 8, 0.1, 0.5, 2.0);
  const auto model = mlp_model(env, 256);
  Rng rng(2);
  for (auto _ : state) benchmark::DoNotOptimize(sample_forward_batch(model, env, rng, 32, 0.05, false));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_SampleForwardBatch)->Unit(benchmark::kMillisecond);

void BM_ObjectiveWithGradient(benchmark::State& state) {
  const auto objective = static_cast<Objective>(state.range(0));
  Hypergrid env(2, 8, 0.1, 0.5, 2.0);
  ModelSpec spec;
  spec.kind = "mlp";
  spec.hidden = 256;
  spec.flow_head = objective_needs_flow_head(objective);
  Rng rng(3);
  const auto model = PolicyModel::create(env, spec, rng);
  const auto batch = sample_forward_batch(model, env, rng, 32, 0.05);
  LossOptions opt;
  opt.objective = objective;
  std::vector<double> grad(model.params.size());
  for (auto _ : state) {
    std::fill(grad.begin(), grad.end(), 0.0);
    benchmark::DoNotOptimize(evaluate_objective(model, env, batch, opt, grad).mean);
  }
  state.SetLabel(to_string(objective));
}
BENCHMARK(BM_ObjectiveWithGradient)
    ->DenseRange(static_cast<int>(Objective::tb), static_cast<int>(Objective::wdb))
    ->Unit(benchmark::kMillisecond);

void BM_OptimizeCertificate(benchmark::State& state) {
  const auto count = static_cast<std::size_t>(state.range(0));
  RegularTree env(3, 3);
  Rng rng(4);
  const auto model = perturbed_balanced_model(env, rng, 0.05);
  const auto sampler = TargetSampler::from_env(env);
  const auto bwd = flow_samples(sample_target_trajectories(model, env, sampler, rng, count), model.log_z());
  const auto fwd = flow_samples(sample_forward_batch(model, env, rng, count, 0.0), model.log_z());
  for (auto _ : state) benchmark::DoNotOptimize(optimize_certificate(bwd, fwd, 0.025).bound);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * count));
}
BENCHMARK(BM_OptimizeCertificate)->Arg(1000)->Arg(10000)->Unit(benchmark::kMicrosecond);

void BM_ExactTerminalDistribution(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  Hypergrid env(2, side, 0.1, 0.5, 2.0);
  const auto model = mlp_model(env, 64);
  for (auto _ : state) benchmark::DoNotOptimize(exact_tv(model, env));
  state.SetLabel("hypergrid 2x" + std::to_string(side));
}
BENCHMARK(BM_ExactTerminalDistribution)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_StableRound(benchmark::State& state) {
  auto env = std::make_shared<Hypergrid>(2, 8, 0.1, 0.5, 2.0);
  TrainConfig cfg;
  cfg.eval_every = 0;
  cfg.max_rounds = 1u << 30;
  Trainer trainer(env, mlp_model(*env, 256), cfg);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step().mean_loss);
}
BENCHMARK(BM_StableRound)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
