#include <doctest.h>
#include <torch/torch.h>

#include <filesystem>
#include <set>

#include "mawm/trainer.hpp"

using namespace mawm;

namespace {

RunConfig tiny_run() {
  RunConfig c;
  c.env.n_agents = 2;
  c.env.episode_limit = 10;
  c.env.grid_size = 3;
  c.tokenizer.hidden = 16;
  c.tokenizer.layers = 2;
  c.tokenizer.codebook_size = 8;
  c.tokenizer.tokens = 2;
  c.tokenizer.code_dim = 4;
  c.tokenizer.fit_observations = 50;
  c.dynamics.embed_dim = 16;
  c.dynamics.layers = 1;
  c.dynamics.heads = 2;
  c.dynamics.horizon = 3;
  c.dynamics.batch_size = 4;
  c.dynamics.aggregator.cross_heads = 2;
  c.dynamics.aggregator.inner_heads = 2;
  c.dynamics.aggregator.head_dim = 8;
  c.dynamics.aggregator.inner_layers = 1;
  c.behavior.hidden = 16;
  c.behavior.stack = 2;
  c.behavior.ppo_epochs = 1;
  c.schedule.tokenizer_batch = 16;
  c.schedule.rollouts = 4;
  c.schedule.policy_updates = 1;
  c.schedule.eval_episodes = 2;
  return c;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("config text parsing") {
  auto config = parse_run_config(
      "seed = 7\n"
      "[env]\n"
      "name = coupled-chain  # inline comment\n"
      "agents = 3\n"
      "[dynamics]\n"
      "horizon = 8\n"
      "centralized = true\n"
      "[aggregator]\n"
      "kind = self_attention\n");
  CHECK(config.seed == 7);
  CHECK(config.env.kind == EnvKind::kCoupledChain);
  CHECK(config.env.n_agents == 3);
  CHECK(config.dynamics.horizon == 8);
  CHECK(config.dynamics.centralized);
  CHECK(config.dynamics.aggregator.kind == AggregatorKind::kSelfAttention);

  CHECK_THROWS_AS(parse_run_config("dynamics.unknown = 1\n"), std::invalid_argument);
  CHECK_THROWS(parse_run_config("dynamics.horizon = many\n"));
  CHECK_THROWS(parse_run_config("no equals sign\n"));

  set_config_value(config, "behavior.lambda", "0.5");
  CHECK(config.behavior.lambda == 0.5);

  auto again = parse_run_config(to_text(config));
  CHECK(to_text(again) == to_text(config));
  std::set<std::string> keys;
  for (const auto& k : run_config_keys()) CHECK(keys.insert(k).second);
  CHECK(keys.count("schedule.env_steps") == 1);
}

TEST_CASE("policy update count follows the imagination horizon") {
  CHECK(policy_updates_for_horizon(15) == 4);
  CHECK(policy_updates_for_horizon(8) == 10);
  CHECK(policy_updates_for_horizon(5) == 30);
}

TEST_CASE("seed streams are distinct and reproducible") {
  auto a = derive_seeds(0);
  auto b = derive_seeds(0);
  auto c = derive_seeds(1);
  CHECK(a.env == b.env);
  CHECK(a.sampling == b.sampling);
  std::set<std::uint64_t> streams = {a.env, a.eval_env, a.model, a.sampling};
  CHECK(streams.size() == 4);
  CHECK(a.env != c.env);
}

TEST_CASE("trainer accounts for real and imagined steps separately") {
  Trainer trainer(tiny_run());
  CHECK_THROWS_AS(trainer.train_agents(1), std::logic_error);
  trainer.collect_experience(60);
  CHECK(trainer.env_steps() == 60);
  CHECK(trainer.buffer().size() == 60);
  trainer.train_world_model(2, 2);
  CHECK(trainer.world_model_trained());
  auto stats = trainer.train_agents(2);
  CHECK(stats.imagined_steps == 2 * 4 * 3);
  CHECK(trainer.env_steps() == 60);
  auto eval = trainer.evaluate(2);
  CHECK(eval.episodes == 2);
  CHECK(trainer.env_steps() == 60);
}

TEST_CASE("checkpoints restore training bit for bit") {
  auto dir = scratch("mawm_trainer_ckpt");
  Trainer first(tiny_run(), dir);
  first.collect_experience(60);
  first.train_world_model(2, 2);
  first.train_agents(1);
  first.save_checkpoint(dir / "ckpt");

  auto continue_run = [](Trainer& t) {
    t.collect_experience(10);
    auto wm = t.train_world_model(1, 2);
    auto ag = t.train_agents(1);
    return std::make_pair(wm.total, ag.behavior.actor_loss);
  };
  auto expected = continue_run(first);

  Trainer second(tiny_run(), dir);
  second.load_checkpoint(dir / "ckpt");
  CHECK(second.env_steps() == 60);
  auto got = continue_run(second);
  CHECK(got.first == expected.first);
  CHECK(got.second == expected.second);

  auto other = tiny_run();
  other.dynamics.embed_dim = 32;
  Trainer mismatched(other, dir);
  CHECK_THROWS(mismatched.load_checkpoint(dir / "ckpt"));
  std::filesystem::remove_all(dir);
}
