#include <doctest.h>
#include <torch/torch.h>

#include <vector>

#include "mawm/env.hpp"
#include "mawm/imagination.hpp"

using namespace mawm;

namespace {

struct Fixture {
  static constexpr int kAgents = 2;
  static constexpr int kObs = 3;
  static constexpr int kActions = 4;

  TokenizerConfig tok_config;
  std::unique_ptr<BinsTokenizer> tokenizer;
  WorldModel model{nullptr};
  Actor actor{nullptr};

  explicit Fixture(int horizon = 4) {
    tok_config.kind = TokenizerKind::kBins;
    tok_config.bins = 8;
    tokenizer = std::make_unique<BinsTokenizer>(kObs, tok_config);
    tokenizer->fit(torch::rand({64, kObs}) * 2.0 - 1.0);
    DynamicsConfig config;
    config.embed_dim = 16;
    config.layers = 1;
    config.heads = 2;
    config.dropout = 0.0;
    config.horizon = horizon;
    config.aggregator.cross_heads = 2;
    config.aggregator.inner_heads = 2;
    config.aggregator.head_dim = 8;
    config.aggregator.inner_layers = 1;
    config.aggregator.dropout = 0.0;
    model = WorldModel(WorldModelShape{kAgents, kObs, tok_config.bins, kActions}, config);
    actor = Actor(2 * kObs, kActions, 16);
  }

  ImaginedRollout run(int R, ImaginationOptions options, const PolicyObserver& observer = {}) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
    auto obs = torch::rand({R, kAgents, kObs}) * 2.0 - 1.0;
    auto avail = torch::ones({R, kAgents, kActions}, torch::kBool);
    avail.select(-1, 2).fill_(false);
    return imagine(actor, model, *tokenizer, obs, avail, options, gen, observer);
  }
};

ImaginationOptions options_for(int H) {
  ImaginationOptions o;
  o.horizon = H;
  o.stack = 2;
  return o;
}

}  // namespace

TEST_CASE("imagination shapes and horizon 1") {
  Fixture f(4);
  auto one = f.run(5, options_for(1));
  CHECK(one.horizon() == 1);
  CHECK(one.actions.sizes() == torch::IntArrayRef({5, 1, 2}));
  CHECK(one.rewards.sizes() == torch::IntArrayRef({5, 1, 2}));

  auto full = f.run(6, options_for(4));
  CHECK(full.obs.sizes() == torch::IntArrayRef({6, 4, 2, 3}));
  CHECK(full.policy_inputs.sizes() == torch::IntArrayRef({6, 4, 2, 6}));
  CHECK(full.avail.sizes() == torch::IntArrayRef({6, 4, 2, 4}));
  CHECK(full.rollouts() * full.n_agents() == 12);
  CHECK_THROWS_AS(f.run(2, options_for(5)), ContextOverflowError);
}

TEST_CASE("imagination touches no environment and feeds only decoded observations") {
  Fixture f(4);
  EnvSpec spec;
  spec.n_agents = 2;
  CoopSwitchEnv env(spec);
  env.reset();
  const auto before = env.total_steps();

  int calls = 0;
  auto observer = [&](int step, const torch::Tensor& inputs, const torch::Tensor& reconstructed) {
    CHECK(step == calls);
    ++calls;
    // Decoded observations are fixed points of tokenize -> detokenize.
    CHECK(torch::equal(f.tokenizer->reconstruct(reconstructed), reconstructed));
    // The newest stacked frame is exactly the reconstructed observation.
    CHECK(torch::equal(inputs.slice(-1, Fixture::kObs), reconstructed));
  };
  auto rollout = f.run(8, options_for(4), observer);
  CHECK(calls == 4);
  CHECK(env.total_steps() == before);
  CHECK(torch::equal(rollout.obs, rollout.policy_inputs.slice(-1, Fixture::kObs)));
}

TEST_CASE("imagined actions respect the availability masks") {
  Fixture f(4);
  auto rollout = f.run(32, options_for(4));
  auto taken = rollout.avail.gather(-1, rollout.actions.unsqueeze(-1)).squeeze(-1);
  CHECK(taken.all().item<bool>());
  CHECK((rollout.actions.select(1, 0) != 2).all().item<bool>());
  CHECK(rollout.avail.any(-1).all().item<bool>());
}

TEST_CASE("imagination leaves world-model weights untouched and records no graph") {
  Fixture f(3);
  std::vector<torch::Tensor> before;
  for (const auto& p : f.model->parameters()) before.push_back(p.detach().clone());
  auto rollout = f.run(4, options_for(3));
  CHECK_FALSE(rollout.rewards.requires_grad());
  CHECK_FALSE(rollout.obs.requires_grad());
  std::size_t i = 0;
  for (const auto& p : f.model->parameters()) CHECK(torch::equal(before[i++], p));
}

TEST_CASE("termination masks later steps") {
  Fixture f(4);
  auto options = options_for(4);
  options.termination_threshold = 2.0;  // every predicted discount ends the episode
  auto rollout = f.run(3, options);
  CHECK(rollout.alive.select(1, 0).eq(1.0).all().item<bool>());
  CHECK(rollout.alive.slice(1, 1).eq(0.0).all().item<bool>());
  CHECK(rollout.discounts.eq(0.0).all().item<bool>());
}

TEST_CASE("availability repair") {
  auto probs = torch::tensor({{0.1, 0.3, 0.2}, {0.9, 0.6, 0.1}});
  auto avail = repair_avail(probs, 0.5);
  CHECK(torch::equal(avail[0], torch::tensor({false, true, false})));
  CHECK(torch::equal(avail[1], torch::tensor({true, true, false})));
}
