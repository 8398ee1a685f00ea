#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mawm/behavior.hpp"
#include "mawm/dynamics.hpp"
#include "mawm/env.hpp"
#include "mawm/imagination.hpp"
#include "mawm/replay_buffer.hpp"
#include "mawm/tokenizer.hpp"

namespace mawm {

struct ScheduleConfig {
  std::int64_t env_steps = 100000;
  int collect_per_epoch = 100;
  int tokenizer_epochs = 200;
  int world_model_epochs = 200;
  int tokenizer_batch = 256;
  /// Buffered steps required before the first training phase.
  int train_start = 100;
  /// 0 picks the count from the imagination horizon.
  int policy_updates = 0;
  int rollouts = 600;
  double imagination_temperature = 1.0;
  std::int64_t buffer_capacity = 50000;
  std::int64_t eval_every = 1000;
  int eval_episodes = 10;
  /// Stop once a greedy evaluation reaches this success rate (0 disables).
  double success_threshold = 0.0;
  int checkpoint_every = 10;
};

/// Full configuration of a run. Every key has a default; see run_config_keys().
struct RunConfig {
  EnvSpec env;
  TokenizerConfig tokenizer;
  DynamicsConfig dynamics;
  BehaviorConfig behavior;
  ScheduleConfig schedule;
  std::uint64_t seed = 0;
};

/// Parses `key = value` lines, optionally grouped under `[section]` headers
/// (a key inside a section is `section.key`). `#` starts a comment. Unknown
/// keys and malformed values are rejected.
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
/// Applies one `key=value` override.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
/// Every key with its current value, one `key = value` line each.
std::string to_text(const RunConfig& config);
std::vector<std::string> run_config_keys();

/// Policy updates per phase for a horizon: 15 -> 4, 8 -> 10, 5 -> 30.
int policy_updates_for_horizon(int horizon);

/// Independent 64-bit streams derived from one master seed.
struct SeedStreams {
  std::uint64_t env;
  std::uint64_t eval_env;
  std::uint64_t model;
  std::uint64_t sampling;
};
SeedStreams derive_seeds(std::uint64_t master);

struct WorldModelStats {
  TokenizerStats tokenizer;
  double total = 0.0;
  double tokens = 0.0;
  double reward = 0.0;
  double discount = 0.0;
  double avail = 0.0;
  double token_accuracy = 0.0;
  double tokenizer_seconds = 0.0;
  double dynamics_seconds = 0.0;
  int tokenizer_updates = 0;
  int dynamics_updates = 0;
};

struct AgentStats {
  BehaviorStats behavior;
  std::int64_t imagined_steps = 0;
  double seconds = 0.0;
  int updates = 0;
};

struct EvalResult {
  double success_rate = 0.0;
  double success_std = 0.0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double mean_length = 0.0;
  int episodes = 0;
  std::int64_t steps = 0;
};

struct RunSummary {
  std::int64_t env_steps = 0;
  int epochs = 0;
  EvalResult final_eval;
  double best_success = 0.0;
  bool reached_threshold = false;
  double wall_seconds = 0.0;
};

/// Receives human-readable progress lines; the trainer itself never logs.
using ProgressSink = std::function<void(const std::string& message)>;

/// Orchestrates collection, tokenizer and world-model training, and behavior
/// learning in imagination.
class Trainer {
 public:
  /// `out_dir` receives metrics.jsonl and checkpoints; empty disables files.
  Trainer(RunConfig config, std::filesystem::path out_dir = {});
  ~Trainer();

  const RunConfig& config() const { return config_; }
  Environment& env() { return *env_; }
  ReplayBuffer& buffer() { return *buffer_; }
  ObservationTokenizer& tokenizer() { return *tokenizer_; }
  WorldModel& world_model() { return world_model_; }
  AgentLearner& learner() { return *learner_; }
  std::mt19937_64& sampling_rng() { return rng_; }
  at::Generator& generator() { return generator_; }

  /// Real interactions with the training environment so far.
  std::int64_t env_steps() const { return env_->total_steps(); }
  int epoch() const { return epoch_; }
  bool world_model_trained() const { return world_model_trained_; }

  void set_progress(ProgressSink sink) { progress_ = std::move(sink); }
  /// Replaces the training environment (e.g. with an instrumented one of the
  /// same spec). The episode in progress restarts.
  void set_environment(std::unique_ptr<Environment> env);

  /// Appends `n` real transitions, acting on reconstructed observations.
  void collect_experience(std::int64_t n);
  WorldModelStats train_world_model(int tokenizer_epochs, int world_model_epochs);
  /// One dynamics update on a fresh batch; returns its loss.
  DynamicsLoss world_model_step();
  AgentStats train_agents(int updates, const PolicyObserver& observer = {});
  EvalResult evaluate(int episodes, ActMode mode = ActMode::kGreedy);

  /// Runs until the env-step budget or the success threshold is met.
  RunSummary run();

  void save_checkpoint(const std::filesystem::path& dir) const;
  void load_checkpoint(const std::filesystem::path& dir);
  /// Loads `<out_dir>/checkpoint` when present; returns whether it did.
  bool resume();

  std::filesystem::path checkpoint_dir() const;

 private:
  void write_metrics(const std::string& json_line);
  void report(const std::string& message) const;
  void begin_episode();
  torch::Tensor reconstruct(const std::vector<float>& joint_obs);

  RunConfig config_;
  std::filesystem::path out_dir_;
  SeedStreams seeds_;
  std::unique_ptr<Environment> env_;
  std::unique_ptr<Environment> eval_env_;
  std::unique_ptr<ReplayBuffer> buffer_;
  std::unique_ptr<ObservationTokenizer> tokenizer_;
  WorldModel world_model_{nullptr};
  std::unique_ptr<torch::optim::AdamW> world_model_opt_;
  std::unique_ptr<AgentLearner> learner_;
  std::mt19937_64 rng_;
  at::Generator generator_;
  ObservationStack stack_;
  int epoch_ = 0;
  bool world_model_trained_ = false;
  std::int64_t next_eval_ = 0;
  std::int64_t eval_steps_ = 0;
  double best_success_ = 0.0;
  float episode_return_ = 0.0F;
  std::ofstream metrics_;
  ProgressSink progress_;
};

}  // namespace mawm
