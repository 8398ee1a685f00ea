// Micro benchmarks for the hot paths: tokenization, aggregation, a dynamics
// update, incremental decoding and imagination.

#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "mawm/aggregator.hpp"
#include "mawm/behavior.hpp"
#include "mawm/dynamics.hpp"
#include "mawm/imagination.hpp"
#include "mawm/tokenizer.hpp"

using namespace mawm;

namespace {

DynamicsConfig bench_dynamics(bool centralized) {
  DynamicsConfig c;
  c.embed_dim = 64;
  c.layers = 2;
  c.heads = 4;
  c.dropout = 0.0;
  c.horizon = 8;
  c.centralized = centralized;
  c.aggregator.cross_heads = 4;
  c.aggregator.inner_heads = 4;
  c.aggregator.head_dim = 16;
  c.aggregator.inner_layers = 1;
  c.aggregator.dropout = 0.0;
  return c;
}

SegmentBatch random_segments(std::int64_t B, std::int64_t H, const WorldModelShape& shape) {
  SegmentBatch batch;
  batch.tokens = torch::randint(shape.vocab_size, {B, H, shape.n_agents, shape.tokens_per_obs}, torch::kInt64);
  batch.actions = torch::randint(shape.n_actions, {B, H, shape.n_agents}, torch::kInt64);
  batch.rewards = torch::randn({B, H});
  batch.continuation = torch::full({B, H}, kContinuationLabel);
  batch.avail = torch::ones({B, H, shape.n_agents, shape.n_actions});
  batch.valid = torch::ones({B, H});
  return batch;
}

void BM_VqEncode(benchmark::State& state) {
  TokenizerConfig config;
  config.hidden = 128;
  config.layers = 2;
  config.codebook_size = 64;
  config.tokens = 4;
  config.code_dim = 16;
  VqTokenizer tokenizer(16, config);
  auto obs = torch::randn({state.range(0), 16});
  tokenizer.fit(obs);
  for (auto _ : state) benchmark::DoNotOptimize(tokenizer.encode(obs));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_VqEncode)->Arg(64)->Arg(1024);

void BM_Aggregator(benchmark::State& state, AggregatorKind kind) {
  const auto n = state.range(0);
  AggregatorConfig config;
  config.kind = kind;
  config.dropout = 0.0;
  torch::NoGradGuard guard;
  auto joint = torch::randn({32, n, 6, 64});
  if (kind == AggregatorKind::kPerceiver) {
    PerceiverAggregator agg(n, 64, config);
    agg->eval();
    for (auto _ : state) benchmark::DoNotOptimize(agg->forward(joint));
  } else {
    SelfAttentionAggregator agg(n, 64, config);
    agg->eval();
    for (auto _ : state) benchmark::DoNotOptimize(agg->pooled(joint));
  }
}
BENCHMARK_CAPTURE(BM_Aggregator, perceiver, AggregatorKind::kPerceiver)->Arg(2)->Arg(5)->Arg(9);
BENCHMARK_CAPTURE(BM_Aggregator, self_attention, AggregatorKind::kSelfAttention)->Arg(2)->Arg(5)->Arg(9);

void BM_DynamicsUpdate(benchmark::State& state, bool centralized) {
  WorldModelShape shape{static_cast<int>(state.range(0)), 4, 64, 5};
  WorldModel model(shape, bench_dynamics(centralized));
  torch::optim::AdamW opt(model->parameters(), torch::optim::AdamWOptions(1e-4));
  auto batch = random_segments(16, 8, shape);
  for (auto _ : state) {
    opt.zero_grad();
    auto loss = model->loss(batch);
    loss.total.backward();
    opt.step();
  }
}
BENCHMARK_CAPTURE(BM_DynamicsUpdate, decentralized, false)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_DynamicsUpdate, centralized, true)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_CachedRollout(benchmark::State& state) {
  WorldModelShape shape{2, 4, 64, 5};
  WorldModel model(shape, bench_dynamics(false));
  model->eval();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(0);
  auto start = torch::randint(64, {state.range(0), 2, 4}, torch::kInt64);
  auto actions = torch::zeros({state.range(0), 2}, torch::kInt64);
  for (auto _ : state) {
    WorldModelRollout rollout(model, {}, gen);
    rollout.start(start);
    for (int t = 0; t + 1 < 8; ++t) {
      rollout.act(actions);
      benchmark::DoNotOptimize(rollout.next_observation());
    }
  }
}
BENCHMARK(BM_CachedRollout)->Arg(16)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Imagination(benchmark::State& state) {
  const std::int64_t obs_dim = 12;
  TokenizerConfig tconfig;
  tconfig.hidden = 64;
  tconfig.layers = 2;
  tconfig.codebook_size = 64;
  tconfig.tokens = 4;
  tconfig.code_dim = 16;
  VqTokenizer tokenizer(obs_dim, tconfig);
  auto obs = torch::rand({state.range(0), 2, obs_dim});
  tokenizer.fit(obs.reshape({-1, obs_dim}));
  WorldModel model(WorldModelShape{2, 4, 64, 5}, bench_dynamics(false));
  model->eval();
  Actor actor(obs_dim, 5, 64);
  auto avail = torch::ones({state.range(0), 2, 5});
  auto gen = at::make_generator<at::CPUGeneratorImpl>(0);
  ImaginationOptions options;
  options.horizon = 8;
  options.stack = 1;
  for (auto _ : state) benchmark::DoNotOptimize(imagine(actor, model, tokenizer, obs, avail, options, gen));
  state.SetItemsProcessed(state.iterations() * state.range(0) * options.horizon);
}
BENCHMARK(BM_Imagination)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_LambdaReturns(benchmark::State& state) {
  auto r = torch::randn({state.range(0), 2, 15});
  auto g = torch::full({state.range(0), 2, 15}, 0.99);
  auto v = torch::randn({state.range(0), 2, 16});
  for (auto _ : state) benchmark::DoNotOptimize(lambda_returns(r, g, v, 0.95));
}
BENCHMARK(BM_LambdaReturns)->Arg(600);

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
